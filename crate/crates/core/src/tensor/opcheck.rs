//! Finite-difference sweep over every differentiable operation.
//!
//! Each op is wrapped into a scalar loss and checked on three random small
//! shapes. Inputs for kinked ops (relu, abs) are sampled away from the kink
//! and sampling coordinates away from integers, where the true derivative
//! exists.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use super::gradcheck::{check_op_gradient, GradCheckOpts, GradCheckReport};
use super::ops::{self, Axis};
use super::{Tape, Tensor, Var};
use crate::error::Result;

fn rand_tensor(rng: &mut ChaCha12Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Uniform in [-1,-margin] u [margin,1]; keeps relu/abs probes off the kink.
fn rand_tensor_off_zero(rng: &mut ChaCha12Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(margin..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Sampling coordinates strictly inside the grid and away from integers.
fn rand_coords(rng: &mut ChaCha12Rng, b: usize, oh: usize, ow: usize, h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_fn(&[b, oh, ow, 2], |i| {
        let n = if i % 2 == 0 { w } else { h };
        let cell = rng.gen_range(0..n.max(2) - 1) as f64;
        cell + rng.gen_range(0.2..0.8)
    })
}

type Builder = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

fn scalarize(
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
) -> Builder {
    Box::new(move |tape, vars| {
        let y = f(tape, vars)?;
        ops::sum_all(tape, y)
    })
}

/// Runs the sweep; one report per (op, shape) case.
pub fn op_gradient_sweep(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut cases: Vec<(String, Vec<Tensor<f64>>, Builder)> = Vec::new();

    let shapes2 = [vec![2, 3], vec![4, 4], vec![3, 5]];
    let shapes4 = [vec![1, 2, 4, 4], vec![2, 1, 3, 5], vec![1, 3, 2, 2]];

    for (si, s) in shapes2.iter().enumerate() {
        let a = rand_tensor(&mut rng, s);
        let b = rand_tensor(&mut rng, s);
        cases.push((
            format!("add/{si}"),
            vec![a.clone(), b.clone()],
            scalarize(|t, v| ops::add(t, v[0], v[1])),
        ));
        cases.push((
            format!("sub/{si}"),
            vec![a.clone(), b.clone()],
            scalarize(|t, v| ops::sub(t, v[0], v[1])),
        ));
        cases.push((
            format!("mul/{si}"),
            vec![a.clone(), b.clone()],
            scalarize(|t, v| ops::mul(t, v[0], v[1])),
        ));
        cases.push((
            format!("scale/{si}"),
            vec![a.clone()],
            scalarize(|t, v| Ok(ops::scale(t, v[0], -1.7))),
        ));
        cases.push((
            format!("add_const/{si}"),
            vec![a.clone()],
            scalarize(|t, v| Ok(ops::add_const(t, v[0], 0.9))),
        ));
        cases.push((
            format!("mul_scalar_var/{si}"),
            vec![a.clone(), Tensor::scalar(rng.gen_range(-1.0..1.0))],
            scalarize(|t, v| ops::mul_scalar_var(t, v[0], v[1])),
        ));
        cases.push((
            format!("tanh/{si}"),
            vec![a.clone()],
            scalarize(|t, v| ops::tanh(t, v[0])),
        ));
        cases.push((
            format!("sigmoid/{si}"),
            vec![a.clone()],
            scalarize(|t, v| ops::sigmoid(t, v[0])),
        ));
        cases.push((
            format!("relu/{si}"),
            vec![rand_tensor_off_zero(&mut rng, s, 0.05)],
            scalarize(|t, v| ops::relu(t, v[0])),
        ));
        cases.push((
            format!("abs/{si}"),
            vec![rand_tensor_off_zero(&mut rng, s, 0.05)],
            scalarize(|t, v| ops::abs(t, v[0])),
        ));
        // weight the softmax output so its gradient is non-trivial
        let wgt = rand_tensor(&mut rng, s);
        cases.push((
            format!("softmax_lastdim/{si}"),
            vec![a.clone(), wgt],
            scalarize(|t, v| {
                let sm = ops::softmax_lastdim(t, v[0])?;
                ops::mul(t, sm, v[1])
            }),
        ));
        cases.push((
            format!("mean_all/{si}"),
            vec![a.clone()],
            Box::new(|t, v| ops::mean_all(t, v[0])),
        ));
        cases.push((
            format!("transpose2/{si}"),
            vec![a.clone()],
            scalarize(|t, v| {
                let y = ops::transpose2(t, v[0])?;
                let flat_len = 1; // weight by squaring to break symmetry
                let _ = flat_len;
                ops::mul(t, y, y)
            }),
        ));
        let (m, k, n) = (s[0], s[1], 3usize);
        cases.push((
            format!("matmul/{si}"),
            vec![a.clone(), rand_tensor(&mut rng, &[k, n])],
            scalarize(move |t, v| {
                let y = ops::matmul(t, v[0], v[1])?;
                ops::mul(t, y, y)
            }),
        ));
        let _ = m;
    }

    for (si, s) in shapes4.iter().enumerate() {
        let x = rand_tensor(&mut rng, s);
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let co = 2;
        let (kh, kw) = (3, 3);
        cases.push((
            format!("conv2d/{si}"),
            vec![
                x.clone(),
                rand_tensor(&mut rng, &[co, c, kh, kw]),
                rand_tensor(&mut rng, &[co]),
            ],
            scalarize(|t, v| {
                let y = ops::conv2d(t, v[0], v[1], Some(v[2]), 1, 1)?;
                ops::mul(t, y, y)
            }),
        ));
        cases.push((
            format!("group_norm/{si}"),
            vec![
                x.clone(),
                rand_tensor(&mut rng, &[c]),
                rand_tensor(&mut rng, &[c]),
            ],
            scalarize(move |t, v| {
                let y = ops::group_norm(t, v[0], 1, v[1], v[2], 1e-5)?;
                ops::mul(t, y, y)
            }),
        ));
        if h % 2 == 0 && w % 2 == 0 {
            cases.push((
                format!("avg_pool2d/{si}"),
                vec![x.clone()],
                scalarize(|t, v| {
                    let y = ops::avg_pool2d(t, v[0], 2)?;
                    ops::mul(t, y, y)
                }),
            ));
        }
        cases.push((
            format!("bilinear_sample/{si}"),
            vec![x.clone(), rand_coords(&mut rng, b, 3, 3, h, w)],
            scalarize(|t, v| {
                let y = ops::bilinear_sample(t, v[0], v[1])?;
                ops::mul(t, y, y)
            }),
        ));
        cases.push((
            format!("upsample_bilinear/{si}"),
            vec![x.clone()],
            scalarize(|t, v| {
                let y = ops::upsample_bilinear(t, v[0], 2)?;
                ops::mul(t, y, y)
            }),
        ));
        cases.push((
            format!("concat_channels/{si}"),
            vec![x.clone(), rand_tensor(&mut rng, s)],
            scalarize(|t, v| {
                let y = ops::concat_channels(t, &[v[0], v[1]])?;
                ops::mul(t, y, y)
            }),
        ));
        cases.push((
            format!("slice_channels/{si}"),
            vec![x.clone()],
            scalarize(move |t, v| {
                let y = ops::slice_channels(t, v[0], 0, 1)?;
                ops::mul(t, y, y)
            }),
        ));
        cases.push((
            format!("forward_diff_y/{si}"),
            vec![x.clone()],
            scalarize(|t, v| {
                let y = ops::forward_diff(t, v[0], Axis::Y)?;
                ops::mul(t, y, y)
            }),
        ));
        cases.push((
            format!("forward_diff_x/{si}"),
            vec![x.clone()],
            scalarize(|t, v| {
                let y = ops::forward_diff(t, v[0], Axis::X)?;
                ops::mul(t, y, y)
            }),
        ));
    }

    // flow-driven ops on three sizes
    for (si, &(h, w, hl, wl, scale)) in
        [(4usize, 4usize, 4usize, 4usize, 1usize), (4, 4, 2, 2, 2), (3, 5, 3, 5, 1)]
            .iter()
            .enumerate()
    {
        let vol = rand_tensor(&mut rng, &[h, w, hl, wl]);
        let flow = Tensor::from_fn(&[1, 2, h, w], |_| rng.gen_range(-0.8..0.8) + 0.13);
        cases.push((
            format!("lookup_corr/{si}"),
            vec![vol, flow.clone()],
            scalarize(move |t, v| {
                let y = ops::lookup_corr(t, v[0], v[1], 1, scale)?;
                ops::mul(t, y, y)
            }),
        ));
        let img = rand_tensor(&mut rng, &[1, 1, h, w]);
        cases.push((
            format!("flow_to_coords+warp/{si}"),
            vec![img, flow],
            scalarize(|t, v| {
                let coords = ops::flow_to_coords(t, v[1])?;
                let y = ops::bilinear_sample(t, v[0], coords)?;
                ops::mul(t, y, y)
            }),
        ));
    }

    let mut out = Vec::with_capacity(cases.len());
    for (name, inputs, build) in cases {
        let report = check_op_gradient(
            |tape, vars| build(tape, vars),
            &inputs,
            GradCheckOpts::default(),
        )?;
        out.push((name, report));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_finite_difference_checks() {
        let reports = op_gradient_sweep(42).unwrap();
        assert!(reports.len() > 40);
        for (name, r) in &reports {
            assert!(r.passed(), "{name}: {r}");
        }
    }
}
