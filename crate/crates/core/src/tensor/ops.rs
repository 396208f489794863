//! Differentiable operations.
//!
//! Every function takes the tape plus input handles, computes the forward
//! value eagerly and, when any input requires gradient, records a closure
//! that scatters the output gradient back onto the inputs. Shapes are checked
//! up front; no broadcasting beyond the conv bias.

use super::linalg;
use super::tape::{Tape, Var};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[cfg(test)]
#[path = "ops_tests.rs"]
mod tests;

fn same_shape<T: Scalar>(op: &str, tape: &Tape<T>, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(format!(
            "{op}: {:?} vs {:?}",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

pub fn add<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    same_shape("add", tape, a, b)?;
    let data: Vec<T> = tape
        .value(a)
        .data()
        .iter()
        .zip(tape.value(b).data())
        .map(|(&x, &y)| x + y)
        .collect();
    let value = Tensor::new(tape.shape(a), data)?;
    let needs = tape.needs_grad(a) || tape.needs_grad(b);
    Ok(tape.push(
        value,
        needs,
        Some(Box::new(move |gout, tape| {
            tape.accum(a, gout);
            tape.accum(b, gout);
        })),
    ))
}

pub fn sub<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    same_shape("sub", tape, a, b)?;
    let data: Vec<T> = tape
        .value(a)
        .data()
        .iter()
        .zip(tape.value(b).data())
        .map(|(&x, &y)| x - y)
        .collect();
    let value = Tensor::new(tape.shape(a), data)?;
    let needs = tape.needs_grad(a) || tape.needs_grad(b);
    Ok(tape.push(
        value,
        needs,
        Some(Box::new(move |gout, tape| {
            tape.accum(a, gout);
            let neg: Vec<T> = gout.iter().map(|&g| -g).collect();
            tape.accum(b, &neg);
        })),
    ))
}

pub fn mul<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    same_shape("mul", tape, a, b)?;
    let data: Vec<T> = tape
        .value(a)
        .data()
        .iter()
        .zip(tape.value(b).data())
        .map(|(&x, &y)| x * y)
        .collect();
    let value = Tensor::new(tape.shape(a), data)?;
    let needs = tape.needs_grad(a) || tape.needs_grad(b);
    Ok(tape.push(
        value,
        needs,
        Some(Box::new(move |gout, tape| {
            let da: Vec<T> = gout
                .iter()
                .zip(tape.value(b).data())
                .map(|(&g, &y)| g * y)
                .collect();
            let db: Vec<T> = gout
                .iter()
                .zip(tape.value(a).data())
                .map(|(&g, &x)| g * x)
                .collect();
            tape.accum(a, &da);
            tape.accum(b, &db);
        })),
    ))
}

/// `x * c` for a compile-time constant factor.
pub fn scale<T: Scalar>(tape: &mut Tape<T>, x: Var, c: f64) -> Var {
    let cc = T::from_f64(c);
    let value = tape.value(x).map(|v| v * cc);
    let needs = tape.needs_grad(x);
    tape.push(
        value,
        needs,
        Some(Box::new(move |gout, tape| {
            let dx: Vec<T> = gout.iter().map(|&g| g * cc).collect();
            tape.accum(x, &dx);
        })),
    )
}

/// `x + c` elementwise.
pub fn add_const<T: Scalar>(tape: &mut Tape<T>, x: Var, c: f64) -> Var {
    let cc = T::from_f64(c);
    let value = tape.value(x).map(|v| v + cc);
    let needs = tape.needs_grad(x);
    tape.push(
        value,
        needs,
        Some(Box::new(move |gout, tape| tape.accum(x, gout))),
    )
}

/// Multiplies a tensor by a single-element tensor (a learned scalar).
pub fn mul_scalar_var<T: Scalar>(tape: &mut Tape<T>, x: Var, s: Var) -> Result<Var> {
    if tape.value(s).numel() != 1 {
        return Err(Error::shape(format!(
            "mul_scalar_var: scalar operand has shape {:?}",
            tape.shape(s)
        )));
    }
    let sv = tape.value(s).data()[0];
    let value = tape.value(x).map(|v| v * sv);
    let needs = tape.needs_grad(x) || tape.needs_grad(s);
    Ok(tape.push(
        value,
        needs,
        Some(Box::new(move |gout, tape| {
            let dx: Vec<T> = gout.iter().map(|&g| g * sv).collect();
            let ds: T = gout
                .iter()
                .zip(tape.value(x).data())
                .map(|(&g, &v)| g * v)
                .sum();
            tape.accum(x, &dx);
            tape.accum(s, &[ds]);
        })),
    ))
}

pub fn relu<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let value = tape.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
    let needs = tape.needs_grad(x);
    Ok(tape.push(
        value,
        needs,
        Some(Box::new(move |gout, tape| {
            let dx: Vec<T> = gout
                .iter()
                .zip(tape.value(x).data())
                .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                .collect();
            tape.accum(x, &dx);
        })),
    ))
}

pub fn tanh<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let value = tape.value(x).map(|v| v.tanh());
    let needs = tape.needs_grad(x);
    let out = tape.push(value, needs, None);
    if needs {
        attach(tape, out, move |gout, tape| {
            let dx: Vec<T> = gout
                .iter()
                .zip(tape.value(out).data())
                .map(|(&g, &y)| g * (T::one() - y * y))
                .collect();
            tape.accum(x, &dx);
        });
    }
    Ok(out)
}

pub fn sigmoid<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let one = T::one();
    let value = tape.value(x).map(|v| one / (one + (-v).exp()));
    let needs = tape.needs_grad(x);
    let out = tape.push(value, needs, None);
    if needs {
        attach(tape, out, move |gout, tape| {
            let dx: Vec<T> = gout
                .iter()
                .zip(tape.value(out).data())
                .map(|(&g, &y)| g * y * (T::one() - y))
                .collect();
            tape.accum(x, &dx);
        });
    }
    Ok(out)
}

pub fn abs<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let value = tape.value(x).map(|v| v.abs());
    let needs = tape.needs_grad(x);
    Ok(tape.push(
        value,
        needs,
        Some(Box::new(move |gout, tape| {
            // subgradient 0 at the kink
            let dx: Vec<T> = gout
                .iter()
                .zip(tape.value(x).data())
                .map(|(&g, &v)| {
                    if v > T::zero() {
                        g
                    } else if v < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                })
                .collect();
            tape.accum(x, &dx);
        })),
    ))
}

/// Softmax along the last dimension; rows sum to 1.
pub fn softmax_lastdim<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let n = *shape
        .last()
        .ok_or_else(|| Error::shape("softmax on 0-d tensor".into()))?;
    let rows = tape.value(x).numel() / n;
    let xin = tape.value(x).data();
    let mut data = vec![T::zero(); xin.len()];
    for r in 0..rows {
        let row = &xin[r * n..(r + 1) * n];
        let m = row.iter().cloned().fold(row[0], |a, b| if b > a { b } else { a });
        let mut denom = T::zero();
        for (o, &v) in data[r * n..(r + 1) * n].iter_mut().zip(row) {
            let e = (v - m).exp();
            *o = e;
            denom = denom + e;
        }
        for o in data[r * n..(r + 1) * n].iter_mut() {
            *o = *o / denom;
        }
    }
    let needs = tape.needs_grad(x);
    let out = tape.push(Tensor::new(&shape, data)?, needs, None);
    if needs {
        attach(tape, out, move |gout, tape| {
            let y = tape.value(out).data();
            let mut dx = vec![T::zero(); y.len()];
            for r in 0..rows {
                let ys = &y[r * n..(r + 1) * n];
                let gs = &gout[r * n..(r + 1) * n];
                let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                for ((d, &yi), &gi) in dx[r * n..(r + 1) * n].iter_mut().zip(ys).zip(gs) {
                    *d = yi * (gi - dot);
                }
            }
            tape.accum(x, &dx);
        });
    }
    Ok(out)
}

/// Attaches a backward closure to a node created without one (used when the
/// closure must capture the output id).
fn attach<T: Scalar>(
    tape: &mut Tape<T>,
    out: Var,
    f: impl FnOnce(&[T], &mut Tape<T>) + 'static,
) {
    tape.replace_back(out, Box::new(f));
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

pub fn sum_all<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s: T = tape.value(x).data().iter().cloned().sum();
    let needs = tape.needs_grad(x);
    let n = tape.value(x).numel();
    Ok(tape.push(
        Tensor::scalar(s),
        needs,
        Some(Box::new(move |gout, tape| {
            let dx = vec![gout[0]; n];
            tape.accum(x, &dx);
        })),
    ))
}

pub fn mean_all<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let n = tape.value(x).numel();
    if n == 0 {
        return Err(Error::invalid("mean of empty tensor"));
    }
    let inv = T::from_f64(1.0 / n as f64);
    let s: T = tape.value(x).data().iter().cloned().sum();
    let needs = tape.needs_grad(x);
    Ok(tape.push(
        Tensor::scalar(s * inv),
        needs,
        Some(Box::new(move |gout, tape| {
            let dx = vec![gout[0] * inv; n];
            tape.accum(x, &dx);
        })),
    ))
}

// ---------------------------------------------------------------------------
// shape
// ---------------------------------------------------------------------------

pub fn reshape<T: Scalar>(tape: &mut Tape<T>, x: Var, shape: &[usize]) -> Result<Var> {
    let value = tape.value(x).clone().reshaped(shape)?;
    let needs = tape.needs_grad(x);
    Ok(tape.push(
        value,
        needs,
        Some(Box::new(move |gout, tape| tape.accum(x, gout))),
    ))
}

/// Transpose of a 2-d tensor.
pub fn transpose2<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 {
        return Err(Error::shape(format!("transpose2 on shape {:?}", shape)));
    }
    let (m, n) = (shape[0], shape[1]);
    let data = linalg::transpose(tape.value(x).data(), m, n);
    let needs = tape.needs_grad(x);
    Ok(tape.push(
        Tensor::new(&[n, m], data)?,
        needs,
        Some(Box::new(move |gout, tape| {
            let dx = linalg::transpose(gout, n, m);
            tape.accum(x, &dx);
        })),
    ))
}

/// Concatenates `[B,C_i,H,W]` tensors along the channel axis.
pub fn concat_channels<T: Scalar>(tape: &mut Tape<T>, parts: &[Var]) -> Result<Var> {
    if parts.is_empty() {
        return Err(Error::invalid("concat of zero tensors"));
    }
    let first = tape.shape(parts[0]).to_vec();
    if first.len() != 4 {
        return Err(Error::shape(format!("concat_channels on {:?}", first)));
    }
    let (b, h, w) = (first[0], first[2], first[3]);
    let mut channels = Vec::with_capacity(parts.len());
    let mut c_total = 0;
    for &p in parts {
        let s = tape.shape(p);
        if s.len() != 4 || s[0] != b || s[2] != h || s[3] != w {
            return Err(Error::shape(format!(
                "concat_channels: {:?} incompatible with {:?}",
                s, first
            )));
        }
        channels.push(s[1]);
        c_total += s[1];
    }
    let plane = h * w;
    let mut data = vec![T::zero(); b * c_total * plane];
    for bi in 0..b {
        let mut c_off = 0;
        for (&p, &ci) in parts.iter().zip(&channels) {
            let src = tape.value(p).data();
            let src_base = bi * ci * plane;
            let dst_base = (bi * c_total + c_off) * plane;
            data[dst_base..dst_base + ci * plane]
                .copy_from_slice(&src[src_base..src_base + ci * plane]);
            c_off += ci;
        }
    }
    let parts_owned: Vec<Var> = parts.to_vec();
    let needs = parts.iter().any(|&p| tape.needs_grad(p));
    Ok(tape.push(
        Tensor::new(&[b, c_total, h, w], data)?,
        needs,
        Some(Box::new(move |gout, tape| {
            for bi in 0..b {
                let mut c_off = 0;
                for (&p, &ci) in parts_owned.iter().zip(&channels) {
                    let dst_base = (bi * c_total + c_off) * plane;
                    // scatter only this part's slice; accum expects the full
                    // buffer, so build it per part
                    let mut dpart = vec![T::zero(); tape.value(p).numel()];
                    let src_base = bi * ci * plane;
                    dpart[src_base..src_base + ci * plane]
                        .copy_from_slice(&gout[dst_base..dst_base + ci * plane]);
                    tape.accum(p, &dpart);
                    c_off += ci;
                }
            }
        })),
    ))
}

/// Channels `[c0, c1)` of a `[B,C,H,W]` tensor.
pub fn slice_channels<T: Scalar>(tape: &mut Tape<T>, x: Var, c0: usize, c1: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || c1 > s[1] || c0 >= c1 {
        return Err(Error::shape(format!(
            "slice_channels [{c0},{c1}) of {:?}",
            s
        )));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let plane = h * w;
    let cs = c1 - c0;
    let mut data = vec![T::zero(); b * cs * plane];
    let src = tape.value(x).data();
    for bi in 0..b {
        let src_base = (bi * c + c0) * plane;
        let dst_base = bi * cs * plane;
        data[dst_base..dst_base + cs * plane].copy_from_slice(&src[src_base..src_base + cs * plane]);
    }
    let needs = tape.needs_grad(x);
    Ok(tape.push(
        Tensor::new(&[b, cs, h, w], data)?,
        needs,
        Some(Box::new(move |gout, tape| {
            let mut dx = vec![T::zero(); tape.value(x).numel()];
            for bi in 0..b {
                let src_base = (bi * c + c0) * plane;
                let dst_base = bi * cs * plane;
                dx[src_base..src_base + cs * plane]
                    .copy_from_slice(&gout[dst_base..dst_base + cs * plane]);
            }
            tape.accum(x, &dx);
        })),
    ))
}

// ---------------------------------------------------------------------------
// dense linear algebra
// ---------------------------------------------------------------------------

/// `[M,K] x [K,N] -> [M,N]`.
pub fn matmul<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let sa = tape.shape(a).to_vec();
    let sb = tape.shape(b).to_vec();
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(Error::shape(format!("matmul {:?} x {:?}", sa, sb)));
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let mut data = vec![T::zero(); m * n];
    linalg::matmul_accum(&mut data, tape.value(a).data(), tape.value(b).data(), m, k, n);
    let needs = tape.needs_grad(a) || tape.needs_grad(b);
    Ok(tape.push(
        Tensor::new(&[m, n], data)?,
        needs,
        Some(Box::new(move |gout, tape| {
            let da = {
                let bv = tape.value(b).data();
                let mut da = vec![T::zero(); m * k];
                linalg::matmul_accum_bt(&mut da, gout, bv, m, k, n);
                da
            };
            tape.accum(a, &da);
            let db = {
                let av = tape.value(a).data();
                let mut db = vec![T::zero(); k * n];
                linalg::matmul_accum_at(&mut db, av, gout, m, k, n);
                db
            };
            tape.accum(b, &db);
        })),
    ))
}

// ---------------------------------------------------------------------------
// convolution stack
// ---------------------------------------------------------------------------

fn conv_out_dim(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let span = n + 2 * pad;
    if span < k {
        return Err(Error::shape(format!(
            "conv kernel {k} larger than padded extent {span}"
        )));
    }
    Ok((span - k) / stride + 1)
}

fn im2col<T: Scalar>(
    input: &[T],
    (c_in, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
    cols: &mut [T],
) {
    let n = oh * ow;
    for ci in 0..c_in {
        for ky in 0..kh {
            for kx in 0..kw {
                let k = (ci * kh + ky) * kw + kx;
                let row = &mut cols[k * n..(k + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        for v in dst.iter_mut() {
                            *v = T::zero();
                        }
                        continue;
                    }
                    let src_row = &input[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        dst[ox] = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_accum<T: Scalar>(
    cols: &[T],
    (c_in, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
    dinput: &mut [T],
) {
    let n = oh * ow;
    for ci in 0..c_in {
        for ky in 0..kh {
            for kx in 0..kw {
                let k = (ci * kh + ky) * kw + kx;
                let row = &cols[k * n..(k + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst =
                        &mut dinput[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] = dst[ix as usize] + row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-d cross-correlation convolution, `input [B,Cin,H,W]`, `weight
/// [Cout,Cin,kh,kw]`, optional `bias [Cout]`.
pub fn conv2d<T: Scalar>(
    tape: &mut Tape<T>,
    input: Var,
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    if stride == 0 {
        return Err(Error::invalid("conv2d stride must be >= 1"));
    }
    let si = tape.shape(input).to_vec();
    let sw = tape.shape(weight).to_vec();
    if si.len() != 4 || sw.len() != 4 {
        return Err(Error::shape(format!("conv2d input {:?} weight {:?}", si, sw)));
    }
    let (b, c_in, h, w) = (si[0], si[1], si[2], si[3]);
    let (c_out, wc_in, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
    if c_in != wc_in {
        return Err(Error::shape(format!(
            "conv2d: input has {c_in} channels but weight expects {wc_in} (input {:?}, weight {:?})",
            si, sw
        )));
    }
    if let Some(bv) = bias {
        if tape.shape(bv) != [c_out] {
            return Err(Error::shape(format!(
                "conv2d: bias shape {:?}, want [{c_out}]",
                tape.shape(bv)
            )));
        }
    }
    let oh = conv_out_dim(h, kh, stride, padding)?;
    let ow = conv_out_dim(w, kw, stride, padding)?;
    let k_dim = c_in * kh * kw;
    let n_dim = oh * ow;

    let mut out = vec![T::zero(); b * c_out * n_dim];
    {
        let xin = tape.value(input).data();
        let wv = tape.value(weight).data();
        let mut cols = vec![T::zero(); k_dim * n_dim];
        for bi in 0..b {
            im2col(
                &xin[bi * c_in * h * w..(bi + 1) * c_in * h * w],
                (c_in, h, w),
                (kh, kw),
                stride,
                padding,
                (oh, ow),
                &mut cols,
            );
            linalg::matmul_accum(
                &mut out[bi * c_out * n_dim..(bi + 1) * c_out * n_dim],
                wv,
                &cols,
                c_out,
                k_dim,
                n_dim,
            );
        }
        if let Some(bvar) = bias {
            let bv = tape.value(bvar).data().to_vec();
            for bi in 0..b {
                for co in 0..c_out {
                    let base = (bi * c_out + co) * n_dim;
                    for v in out[base..base + n_dim].iter_mut() {
                        *v = *v + bv[co];
                    }
                }
            }
        }
    }

    let needs = tape.needs_grad(input)
        || tape.needs_grad(weight)
        || bias.map(|bv| tape.needs_grad(bv)).unwrap_or(false);
    Ok(tape.push(
        Tensor::new(&[b, c_out, oh, ow], out)?,
        needs,
        Some(Box::new(move |gout, tape| {
            let (dinput, dweight) = {
                let xin = tape.value(input).data();
                let wv = tape.value(weight).data();
                let mut dinput = vec![T::zero(); xin.len()];
                let mut dweight = vec![T::zero(); wv.len()];
                let mut cols = vec![T::zero(); k_dim * n_dim];
                let mut dcols = vec![T::zero(); k_dim * n_dim];
                for bi in 0..b {
                    im2col(
                        &xin[bi * c_in * h * w..(bi + 1) * c_in * h * w],
                        (c_in, h, w),
                        (kh, kw),
                        stride,
                        padding,
                        (oh, ow),
                        &mut cols,
                    );
                    let go = &gout[bi * c_out * n_dim..(bi + 1) * c_out * n_dim];
                    linalg::matmul_accum_bt(&mut dweight, go, &cols, c_out, k_dim, n_dim);
                    for v in dcols.iter_mut() {
                        *v = T::zero();
                    }
                    linalg::matmul_accum_at(&mut dcols, wv, go, c_out, k_dim, n_dim);
                    col2im_accum(
                        &dcols,
                        (c_in, h, w),
                        (kh, kw),
                        stride,
                        padding,
                        (oh, ow),
                        &mut dinput[bi * c_in * h * w..(bi + 1) * c_in * h * w],
                    );
                }
                (dinput, dweight)
            };
            tape.accum(input, &dinput);
            tape.accum(weight, &dweight);
            if let Some(bvar) = bias {
                let mut db = vec![T::zero(); c_out];
                for bi in 0..b {
                    for co in 0..c_out {
                        let base = (bi * c_out + co) * n_dim;
                        let mut acc = T::zero();
                        for &g in &gout[base..base + n_dim] {
                            acc = acc + g;
                        }
                        db[co] = db[co] + acc;
                    }
                }
                tape.accum(bvar, &db);
            }
        })),
    ))
}

/// Group normalization over `[B,C,H,W]` with per-channel affine.
pub fn group_norm<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    groups: usize,
    gamma: Var,
    beta: Var,
    eps: f64,
) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::shape(format!("group_norm on {:?}", s)));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if groups == 0 || c % groups != 0 {
        return Err(Error::invalid(format!(
            "group_norm: {c} channels not divisible by {groups} groups"
        )));
    }
    if tape.shape(gamma) != [c] || tape.shape(beta) != [c] {
        return Err(Error::shape(format!(
            "group_norm: gamma {:?} beta {:?}, want [{c}]",
            tape.shape(gamma),
            tape.shape(beta)
        )));
    }
    let cpg = c / groups;
    let m = cpg * h * w;
    let plane = h * w;
    let inv_m = T::from_f64(1.0 / m as f64);
    let epsv = T::from_f64(eps);

    let mut out = vec![T::zero(); b * c * plane];
    let mut istds = vec![T::zero(); b * groups];
    let mut means = vec![T::zero(); b * groups];
    {
        let xin = tape.value(x).data();
        let gom = tape.value(gamma).data();
        let bet = tape.value(beta).data();
        for bi in 0..b {
            for g in 0..groups {
                let base = (bi * c + g * cpg) * plane;
                let seg = &xin[base..base + m];
                let mean: T = seg.iter().cloned().sum::<T>() * inv_m;
                let var: T = seg
                    .iter()
                    .map(|&v| (v - mean) * (v - mean))
                    .sum::<T>()
                    * inv_m;
                let istd = T::one() / (var + epsv).sqrt();
                means[bi * groups + g] = mean;
                istds[bi * groups + g] = istd;
                for ci in 0..cpg {
                    let ch = g * cpg + ci;
                    let cb = (bi * c + ch) * plane;
                    for p in 0..plane {
                        let xhat = (xin[cb + p] - mean) * istd;
                        out[cb + p] = gom[ch] * xhat + bet[ch];
                    }
                }
            }
        }
    }

    let needs = tape.needs_grad(x) || tape.needs_grad(gamma) || tape.needs_grad(beta);
    Ok(tape.push(
        Tensor::new(&s, out)?,
        needs,
        Some(Box::new(move |gout, tape| {
            let (dx, dgamma, dbeta) = {
                let xin = tape.value(x).data();
                let gom = tape.value(gamma).data();
                let mut dx = vec![T::zero(); xin.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for bi in 0..b {
                    for g in 0..groups {
                        let mean = means[bi * groups + g];
                        let istd = istds[bi * groups + g];
                        // first pass: per-group reductions
                        let mut sum1 = T::zero();
                        let mut sum2 = T::zero();
                        for ci in 0..cpg {
                            let ch = g * cpg + ci;
                            let cb = (bi * c + ch) * plane;
                            for p in 0..plane {
                                let xhat = (xin[cb + p] - mean) * istd;
                                let dy = gout[cb + p];
                                dgamma[ch] = dgamma[ch] + dy * xhat;
                                dbeta[ch] = dbeta[ch] + dy;
                                let dxhat = dy * gom[ch];
                                sum1 = sum1 + dxhat;
                                sum2 = sum2 + dxhat * xhat;
                            }
                        }
                        let c1 = sum1 * inv_m;
                        let c2 = sum2 * inv_m;
                        for ci in 0..cpg {
                            let ch = g * cpg + ci;
                            let cb = (bi * c + ch) * plane;
                            for p in 0..plane {
                                let xhat = (xin[cb + p] - mean) * istd;
                                let dxhat = gout[cb + p] * gom[ch];
                                dx[cb + p] = istd * (dxhat - c1 - xhat * c2);
                            }
                        }
                    }
                }
                (dx, dgamma, dbeta)
            };
            tape.accum(x, &dx);
            tape.accum(gamma, &dgamma);
            tape.accum(beta, &dbeta);
        })),
    ))
}

/// Non-overlapping mean pooling over the last two axes.
pub fn avg_pool2d<T: Scalar>(tape: &mut Tape<T>, x: Var, kernel: usize) -> Result<Var> {
    if kernel == 0 {
        return Err(Error::invalid("avg_pool2d kernel must be >= 1"));
    }
    let s = tape.shape(x).to_vec();
    if s.len() < 2 {
        return Err(Error::shape(format!("avg_pool2d on {:?}", s)));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if h % kernel != 0 || w % kernel != 0 {
        return Err(Error::shape(format!(
            "avg_pool2d: dims {h}x{w} not divisible by kernel {kernel}"
        )));
    }
    let lead: usize = s[..s.len() - 2].iter().product();
    let (oh, ow) = (h / kernel, w / kernel);
    let inv = T::from_f64(1.0 / (kernel * kernel) as f64);
    let mut out = vec![T::zero(); lead * oh * ow];
    {
        let xin = tape.value(x).data();
        for l in 0..lead {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for ky in 0..kernel {
                        let row = (l * h + oy * kernel + ky) * w + ox * kernel;
                        for kx in 0..kernel {
                            acc = acc + xin[row + kx];
                        }
                    }
                    out[(l * oh + oy) * ow + ox] = acc * inv;
                }
            }
        }
    }
    let mut os = s.clone();
    let sl = os.len();
    os[sl - 2] = oh;
    os[sl - 1] = ow;
    let needs = tape.needs_grad(x);
    Ok(tape.push(
        Tensor::new(&os, out)?,
        needs,
        Some(Box::new(move |gout, tape| {
            let mut dx = vec![T::zero(); tape.value(x).numel()];
            for l in 0..lead {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = gout[(l * oh + oy) * ow + ox] * inv;
                        for ky in 0..kernel {
                            let row = (l * h + oy * kernel + ky) * w + ox * kernel;
                            for kx in 0..kernel {
                                dx[row + kx] = dx[row + kx] + g;
                            }
                        }
                    }
                }
            }
            tape.accum(x, &dx);
        })),
    ))
}

// ---------------------------------------------------------------------------
// sampling
// ---------------------------------------------------------------------------

/// Edge-clamped 1-d bilinear footprint: `(i0, i1, frac, interior)`.
/// `interior` is false when the coordinate was clamped, in which case the
/// derivative w.r.t. the coordinate is zero.
#[inline]
fn clamp_lerp<T: Scalar>(c: T, n: usize) -> (usize, usize, T, bool) {
    let maxc = T::from_f64((n - 1) as f64);
    let interior = c >= T::zero() && c <= maxc;
    let cc = if c < T::zero() {
        T::zero()
    } else if c > maxc {
        maxc
    } else {
        c
    };
    let i0 = cc.floor().to_f64() as usize;
    let i1 = (i0 + 1).min(n - 1);
    let frac = cc - T::from_f64(i0 as f64);
    (i0, i1, frac, interior)
}

/// Bilinear sampling of `input [B,C,H,W]` at `coords [B,H',W',2]` in pixel
/// units, `coords[...,0] = x` (column), `coords[...,1] = y` (row).
/// Out-of-range coordinates clamp to the border (replicate).
pub fn bilinear_sample<T: Scalar>(tape: &mut Tape<T>, input: Var, coords: Var) -> Result<Var> {
    let si = tape.shape(input).to_vec();
    let sc = tape.shape(coords).to_vec();
    if si.len() != 4 || sc.len() != 4 || sc[3] != 2 || si[0] != sc[0] {
        return Err(Error::shape(format!(
            "bilinear_sample input {:?} coords {:?}",
            si, sc
        )));
    }
    let (b, c, h, w) = (si[0], si[1], si[2], si[3]);
    let (oh, ow) = (sc[1], sc[2]);
    let plane = h * w;
    let oplane = oh * ow;

    let mut out = vec![T::zero(); b * c * oplane];
    {
        let xin = tape.value(input).data();
        let cv = tape.value(coords).data();
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    let cb = ((bi * oh + oy) * ow + ox) * 2;
                    let (x0, x1, fx, _) = clamp_lerp(cv[cb], w);
                    let (y0, y1, fy, _) = clamp_lerp(cv[cb + 1], h);
                    let w00 = (T::one() - fy) * (T::one() - fx);
                    let w01 = (T::one() - fy) * fx;
                    let w10 = fy * (T::one() - fx);
                    let w11 = fy * fx;
                    for ci in 0..c {
                        let base = (bi * c + ci) * plane;
                        out[(bi * c + ci) * oplane + oy * ow + ox] = w00
                            * xin[base + y0 * w + x0]
                            + w01 * xin[base + y0 * w + x1]
                            + w10 * xin[base + y1 * w + x0]
                            + w11 * xin[base + y1 * w + x1];
                    }
                }
            }
        }
    }

    let needs = tape.needs_grad(input) || tape.needs_grad(coords);
    Ok(tape.push(
        Tensor::new(&[b, c, oh, ow], out)?,
        needs,
        Some(Box::new(move |gout, tape| {
            let (dinput, dcoords) = {
                let xin = tape.value(input).data();
                let cv = tape.value(coords).data();
                let mut dinput = vec![T::zero(); xin.len()];
                let mut dcoords = vec![T::zero(); cv.len()];
                for bi in 0..b {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let cb = ((bi * oh + oy) * ow + ox) * 2;
                            let (x0, x1, fx, xint) = clamp_lerp(cv[cb], w);
                            let (y0, y1, fy, yint) = clamp_lerp(cv[cb + 1], h);
                            let w00 = (T::one() - fy) * (T::one() - fx);
                            let w01 = (T::one() - fy) * fx;
                            let w10 = fy * (T::one() - fx);
                            let w11 = fy * fx;
                            let mut gx = T::zero();
                            let mut gy = T::zero();
                            for ci in 0..c {
                                let base = (bi * c + ci) * plane;
                                let g = gout[(bi * c + ci) * oplane + oy * ow + ox];
                                dinput[base + y0 * w + x0] =
                                    dinput[base + y0 * w + x0] + g * w00;
                                dinput[base + y0 * w + x1] =
                                    dinput[base + y0 * w + x1] + g * w01;
                                dinput[base + y1 * w + x0] =
                                    dinput[base + y1 * w + x0] + g * w10;
                                dinput[base + y1 * w + x1] =
                                    dinput[base + y1 * w + x1] + g * w11;
                                let v00 = xin[base + y0 * w + x0];
                                let v01 = xin[base + y0 * w + x1];
                                let v10 = xin[base + y1 * w + x0];
                                let v11 = xin[base + y1 * w + x1];
                                gx = gx
                                    + g * ((T::one() - fy) * (v01 - v00) + fy * (v11 - v10));
                                gy = gy
                                    + g * ((T::one() - fx) * (v10 - v00) + fx * (v11 - v01));
                            }
                            if xint {
                                dcoords[cb] = dcoords[cb] + gx;
                            }
                            if yint {
                                dcoords[cb + 1] = dcoords[cb + 1] + gy;
                            }
                        }
                    }
                }
                (dinput, dcoords)
            };
            tape.accum(input, &dinput);
            tape.accum(coords, &dcoords);
        })),
    ))
}

/// Builds sampling coordinates `identity + flow` from a `[B,2,H,W]` flow
/// (channel 0 = x displacement, channel 1 = y displacement).
pub fn flow_to_coords<T: Scalar>(tape: &mut Tape<T>, flow: Var) -> Result<Var> {
    let s = tape.shape(flow).to_vec();
    if s.len() != 4 || s[1] != 2 {
        return Err(Error::shape(format!("flow_to_coords on {:?}", s)));
    }
    let (b, h, w) = (s[0], s[2], s[3]);
    let plane = h * w;
    let mut out = vec![T::zero(); b * plane * 2];
    {
        let f = tape.value(flow).data();
        for bi in 0..b {
            for y in 0..h {
                for x in 0..w {
                    let o = ((bi * h + y) * w + x) * 2;
                    out[o] = T::from_f64(x as f64) + f[(bi * 2) * plane + y * w + x];
                    out[o + 1] = T::from_f64(y as f64) + f[(bi * 2 + 1) * plane + y * w + x];
                }
            }
        }
    }
    let needs = tape.needs_grad(flow);
    Ok(tape.push(
        Tensor::new(&[b, h, w, 2], out)?,
        needs,
        Some(Box::new(move |gout, tape| {
            let mut df = vec![T::zero(); tape.value(flow).numel()];
            for bi in 0..b {
                for y in 0..h {
                    for x in 0..w {
                        let o = ((bi * h + y) * w + x) * 2;
                        df[(bi * 2) * plane + y * w + x] = gout[o];
                        df[(bi * 2 + 1) * plane + y * w + x] = gout[o + 1];
                    }
                }
            }
            tape.accum(flow, &df);
        })),
    ))
}

/// Bilinear upsampling of `[B,C,h,w]` by an integer factor (pixel-center
/// aligned). Values are not rescaled; callers scale flows explicitly.
pub fn upsample_bilinear<T: Scalar>(tape: &mut Tape<T>, x: Var, factor: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::shape(format!("upsample_bilinear on {:?}", s)));
    }
    let (b, h, w) = (s[0], s[2], s[3]);
    let (oh, ow) = (h * factor, w * factor);
    let inv = 1.0 / factor as f64;
    let mut grid = vec![T::zero(); b * oh * ow * 2];
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let o = ((bi * oh + oy) * ow + ox) * 2;
                grid[o] = T::from_f64((ox as f64 + 0.5) * inv - 0.5);
                grid[o + 1] = T::from_f64((oy as f64 + 0.5) * inv - 0.5);
            }
        }
    }
    let coords = tape.constant(Tensor::new(&[b, oh, ow, 2], grid)?);
    bilinear_sample(tape, x, coords)
}

// ---------------------------------------------------------------------------
// finite differences (loss stencils)
// ---------------------------------------------------------------------------

/// Forward difference along the last (`Axis::X`) or second-to-last
/// (`Axis::Y`) dimension; the output loses one sample along that axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Y,
    X,
}

pub fn forward_diff<T: Scalar>(tape: &mut Tape<T>, x: Var, axis: Axis) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() < 2 {
        return Err(Error::shape(format!("forward_diff on {:?}", s)));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let lead: usize = s[..s.len() - 2].iter().product();
    let (oh, ow) = match axis {
        Axis::Y => (h - 1, w),
        Axis::X => (h, w - 1),
    };
    if oh == 0 || ow == 0 {
        return Err(Error::shape(format!("forward_diff on degenerate {:?}", s)));
    }
    let mut out = vec![T::zero(); lead * oh * ow];
    {
        let xin = tape.value(x).data();
        for l in 0..lead {
            for y in 0..oh {
                for xx in 0..ow {
                    let base = (l * h + y) * w + xx;
                    let next = match axis {
                        Axis::Y => (l * h + y + 1) * w + xx,
                        Axis::X => base + 1,
                    };
                    out[(l * oh + y) * ow + xx] = xin[next] - xin[base];
                }
            }
        }
    }
    let mut os = s.clone();
    let sl = os.len();
    os[sl - 2] = oh;
    os[sl - 1] = ow;
    let needs = tape.needs_grad(x);
    Ok(tape.push(
        Tensor::new(&os, out)?,
        needs,
        Some(Box::new(move |gout, tape| {
            let mut dx = vec![T::zero(); tape.value(x).numel()];
            for l in 0..lead {
                for y in 0..oh {
                    for xx in 0..ow {
                        let g = gout[(l * oh + y) * ow + xx];
                        let base = (l * h + y) * w + xx;
                        let next = match axis {
                            Axis::Y => (l * h + y + 1) * w + xx,
                            Axis::X => base + 1,
                        };
                        dx[next] = dx[next] + g;
                        dx[base] = dx[base] - g;
                    }
                }
            }
            tape.accum(x, &dx);
        })),
    ))
}

// ---------------------------------------------------------------------------
// correlation lookup
// ---------------------------------------------------------------------------

/// Samples a `(2r+1)^2` neighborhood from one pyramid level.
///
/// `volume [H,W,Hl,Wl]` holds, for each coarse pixel `(h,w)` of the fixed
/// image, a response map over the moving image at this level. For each pixel
/// the window is centered at `(p + flow(p)) / level_scale` (level units) and
/// sampled bilinearly with edge clamping. Output `[1,(2r+1)^2,H,W]`, window
/// offsets enumerated row-major (dy outer, dx inner).
pub fn lookup_corr<T: Scalar>(
    tape: &mut Tape<T>,
    volume: Var,
    flow: Var,
    radius: usize,
    level_scale: usize,
) -> Result<Var> {
    let sv = tape.shape(volume).to_vec();
    let sf = tape.shape(flow).to_vec();
    if sv.len() != 4 {
        return Err(Error::shape(format!("lookup_corr volume {:?}", sv)));
    }
    let (h, w, hl, wl) = (sv[0], sv[1], sv[2], sv[3]);
    if sf != [1, 2, h, w] {
        return Err(Error::shape(format!(
            "lookup_corr flow {:?}, want [1,2,{h},{w}]",
            sf
        )));
    }
    let side = 2 * radius + 1;
    let chans = side * side;
    let plane = h * w;
    let inv_scale = T::from_f64(1.0 / level_scale as f64);
    let rad = radius as f64;

    let mut out = vec![T::zero(); chans * plane];
    {
        let vol = tape.value(volume).data();
        let f = tape.value(flow).data();
        for y in 0..h {
            for x in 0..w {
                let cx = (T::from_f64(x as f64) + f[y * w + x]) * inv_scale;
                let cy = (T::from_f64(y as f64) + f[plane + y * w + x]) * inv_scale;
                let slice = &vol[(y * w + x) * hl * wl..(y * w + x + 1) * hl * wl];
                for dy in 0..side {
                    let sy = cy + T::from_f64(dy as f64 - rad);
                    let (y0, y1, fy, _) = clamp_lerp(sy, hl);
                    for dx in 0..side {
                        let sx = cx + T::from_f64(dx as f64 - rad);
                        let (x0, x1, fx, _) = clamp_lerp(sx, wl);
                        let v = (T::one() - fy) * (T::one() - fx) * slice[y0 * wl + x0]
                            + (T::one() - fy) * fx * slice[y0 * wl + x1]
                            + fy * (T::one() - fx) * slice[y1 * wl + x0]
                            + fy * fx * slice[y1 * wl + x1];
                        out[(dy * side + dx) * plane + y * w + x] = v;
                    }
                }
            }
        }
    }

    let needs = tape.needs_grad(volume) || tape.needs_grad(flow);
    Ok(tape.push(
        Tensor::new(&[1, chans, h, w], out)?,
        needs,
        Some(Box::new(move |gout, tape| {
            let (dvol, dflow) = {
                let vol = tape.value(volume).data();
                let f = tape.value(flow).data();
                let mut dvol = vec![T::zero(); vol.len()];
                let mut dflow = vec![T::zero(); f.len()];
                for y in 0..h {
                    for x in 0..w {
                        let cx = (T::from_f64(x as f64) + f[y * w + x]) * inv_scale;
                        let cy = (T::from_f64(y as f64) + f[plane + y * w + x]) * inv_scale;
                        let sbase = (y * w + x) * hl * wl;
                        let slice = &vol[sbase..sbase + hl * wl];
                        let mut gx_total = T::zero();
                        let mut gy_total = T::zero();
                        for dy in 0..side {
                            let sy = cy + T::from_f64(dy as f64 - rad);
                            let (y0, y1, fy, yint) = clamp_lerp(sy, hl);
                            for dx in 0..side {
                                let sx = cx + T::from_f64(dx as f64 - rad);
                                let (x0, x1, fx, xint) = clamp_lerp(sx, wl);
                                let g = gout[(dy * side + dx) * plane + y * w + x];
                                let w00 = (T::one() - fy) * (T::one() - fx);
                                let w01 = (T::one() - fy) * fx;
                                let w10 = fy * (T::one() - fx);
                                let w11 = fy * fx;
                                dvol[sbase + y0 * wl + x0] =
                                    dvol[sbase + y0 * wl + x0] + g * w00;
                                dvol[sbase + y0 * wl + x1] =
                                    dvol[sbase + y0 * wl + x1] + g * w01;
                                dvol[sbase + y1 * wl + x0] =
                                    dvol[sbase + y1 * wl + x0] + g * w10;
                                dvol[sbase + y1 * wl + x1] =
                                    dvol[sbase + y1 * wl + x1] + g * w11;
                                let v00 = slice[y0 * wl + x0];
                                let v01 = slice[y0 * wl + x1];
                                let v10 = slice[y1 * wl + x0];
                                let v11 = slice[y1 * wl + x1];
                                if xint {
                                    gx_total = gx_total
                                        + g * ((T::one() - fy) * (v01 - v00)
                                            + fy * (v11 - v10));
                                }
                                if yint {
                                    gy_total = gy_total
                                        + g * ((T::one() - fx) * (v10 - v00)
                                            + fx * (v11 - v01));
                                }
                            }
                        }
                        dflow[y * w + x] = gx_total * inv_scale;
                        dflow[plane + y * w + x] = gy_total * inv_scale;
                    }
                }
                (dvol, dflow)
            };
            tape.accum(volume, &dvol);
            tape.accum(flow, &dflow);
        })),
    ))
}
