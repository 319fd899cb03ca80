//! Differentiable ops. Each constructor appends a node to the [`Graph`]
//! whose backward closure captures the input values it needs.

use std::rc::Rc;

use ndarray::{Array1, Array2, Array4, ArrayD, Ix2, Ix3, Ix4, IxDyn};

use super::conv::{conv3d_forward, conv3d_grad_bias, conv3d_grad_input, conv3d_grad_weights};
use super::{Graph, TensorId};

fn as4(v: &ArrayD<f32>) -> Array4<f32> {
    v.view().into_dimensionality::<Ix4>().expect("expected a 4D tensor").to_owned()
}

/// Same-padding stride-1 3D convolution.
///
/// `x (C,S0,S1,S2)`, `w (O,C,k,k,k)`, `b (O)` -> `(O,S0,S1,S2)`.
pub fn conv3d(g: &mut Graph, x: TensorId, w: TensorId, b: TensorId) -> TensorId {
    let xv = g.value_rc(x);
    let wv = g.value_rc(w);
    let bv = g.value_rc(b);
    let w5 = wv
        .view()
        .into_dimensionality::<ndarray::Ix5>()
        .expect("conv weights must be 5D")
        .to_owned();
    let k = w5.dim().2;
    let x4 = as4(&xv);
    let bias: Vec<f32> = bv.iter().copied().collect();
    let out = conv3d_forward(&x4, &w5, Some(&bias));
    g.op(
        out.into_dyn(),
        Box::new(move |grad| {
            let grad4 = as4(grad);
            let x4 = as4(&xv);
            let gx = conv3d_grad_input(&grad4, &w5);
            let gw = conv3d_grad_weights(&x4, &grad4, k);
            let gb = conv3d_grad_bias(&grad4);
            vec![
                (x, gx.into_dyn()),
                (w, gw.into_dyn()),
                (b, Array1::from_vec(gb).into_dyn()),
            ]
        }),
    )
}

/// Dense layer on row-major tokens: `x (T,C) * w (C,O) + b (O)`.
pub fn linear(g: &mut Graph, x: TensorId, w: TensorId, b: TensorId) -> TensorId {
    let xv = g.value_rc(x);
    let wv = g.value_rc(w);
    let bv = g.value_rc(b);
    let x2 = xv.view().into_dimensionality::<Ix2>().expect("linear input must be 2D");
    let w2 = wv.view().into_dimensionality::<Ix2>().expect("linear weights must be 2D");
    let mut out = x2.dot(&w2);
    for mut row in out.rows_mut() {
        for (v, &bias) in row.iter_mut().zip(bv.iter()) {
            *v += bias;
        }
    }
    let (xvc, wvc) = (Rc::clone(&xv), Rc::clone(&wv));
    g.op(
        out.into_dyn(),
        Box::new(move |grad| {
            let g2 = grad.view().into_dimensionality::<Ix2>().expect("grad 2D");
            let x2 = xvc.view().into_dimensionality::<Ix2>().unwrap();
            let w2 = wvc.view().into_dimensionality::<Ix2>().unwrap();
            let gx = g2.dot(&w2.t());
            let gw = x2.t().dot(&g2);
            let gb = g2.sum_axis(ndarray::Axis(0));
            vec![(x, gx.into_dyn()), (w, gw.into_dyn()), (b, gb.into_dyn())]
        }),
    )
}

pub fn relu(g: &mut Graph, x: TensorId) -> TensorId {
    let xv = g.value_rc(x);
    let out = xv.mapv(|v| v.max(0.0));
    g.op(
        out,
        Box::new(move |grad| {
            let mut gx = grad.clone();
            gx.zip_mut_with(&xv, |gv, &v| {
                if v <= 0.0 {
                    *gv = 0.0;
                }
            });
            vec![(x, gx)]
        }),
    )
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

pub fn gelu(g: &mut Graph, x: TensorId) -> TensorId {
    let xv = g.value_rc(x);
    let out = xv.mapv(|v| {
        let u = GELU_C * (v + GELU_A * v * v * v);
        0.5 * v * (1.0 + u.tanh())
    });
    g.op(
        out,
        Box::new(move |grad| {
            let mut gx = grad.clone();
            gx.zip_mut_with(&xv, |gv, &v| {
                let u = GELU_C * (v + GELU_A * v * v * v);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                *gv *= 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
            });
            vec![(x, gx)]
        }),
    )
}

pub fn add(g: &mut Graph, a: TensorId, b: TensorId) -> TensorId {
    let av = g.value_rc(a);
    let bv = g.value_rc(b);
    assert_eq!(av.shape(), bv.shape(), "add requires equal shapes");
    let out = &*av + &*bv;
    g.op(out, Box::new(move |grad| vec![(a, grad.clone()), (b, grad.clone())]))
}

pub fn scale(g: &mut Graph, x: TensorId, s: f32) -> TensorId {
    let xv = g.value_rc(x);
    g.op(xv.mapv(|v| v * s), Box::new(move |grad| vec![(x, grad.mapv(|v| v * s))]))
}

/// Concatenate along axis 0 (the channel axis for `(C,...)` tensors).
pub fn concat(g: &mut Graph, inputs: &[TensorId]) -> TensorId {
    assert!(!inputs.is_empty());
    let values: Vec<Rc<ArrayD<f32>>> = inputs.iter().map(|&id| g.value_rc(id)).collect();
    let views: Vec<_> = values.iter().map(|v| v.view()).collect();
    let out = ndarray::concatenate(ndarray::Axis(0), &views).expect("concat shapes");
    let sizes: Vec<usize> = values.iter().map(|v| v.shape()[0]).collect();
    let ids = inputs.to_vec();
    g.op(
        out,
        Box::new(move |grad| {
            let mut offset = 0usize;
            let mut parts = Vec::with_capacity(ids.len());
            for (&id, &size) in ids.iter().zip(&sizes) {
                let slice = grad
                    .slice_axis(ndarray::Axis(0), ndarray::Slice::from(offset..offset + size))
                    .to_owned();
                parts.push((id, slice));
                offset += size;
            }
            parts
        }),
    )
}

/// 2x2x2 max pooling over the spatial axes of `(C,D,H,W)`; dims must be even.
pub fn maxpool2(g: &mut Graph, x: TensorId) -> TensorId {
    let xv = g.value_rc(x);
    let x4 = xv.view().into_dimensionality::<Ix4>().expect("maxpool input 4D");
    let (c, d, h, w) = x4.dim();
    assert!(d % 2 == 0 && h % 2 == 0 && w % 2 == 0, "maxpool needs even spatial dims");
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let mut out = Array4::<f32>::zeros((c, od, oh, ow));
    let mut argmax = vec![0u32; c * od * oh * ow];
    let mut flat = 0usize;
    for ci in 0..c {
        for i in 0..od {
            for j in 0..oh {
                for kk in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0u32;
                    for (a, bb, cc) in
                        itertools_cube()
                    {
                        let (ii, jj, kc) = (2 * i + a, 2 * j + bb, 2 * kk + cc);
                        let v = x4[[ci, ii, jj, kc]];
                        if v > best {
                            best = v;
                            best_idx = ((ci * d + ii) * h + jj) as u32 * w as u32 + kc as u32;
                        }
                    }
                    out[[ci, i, j, kk]] = best;
                    argmax[flat] = best_idx;
                    flat += 1;
                }
            }
        }
    }
    let in_shape = vec![c, d, h, w];
    g.op(
        out.into_dyn(),
        Box::new(move |grad| {
            let mut gx = ArrayD::<f32>::zeros(IxDyn(&in_shape));
            let gx_flat = gx.as_slice_mut().unwrap();
            for (&gi, &src) in grad.iter().zip(&argmax) {
                gx_flat[src as usize] += gi;
            }
            vec![(x, gx)]
        }),
    )
}

fn itertools_cube() -> impl Iterator<Item = (usize, usize, usize)> {
    (0..2usize).flat_map(|a| (0..2usize).flat_map(move |b| (0..2usize).map(move |c| (a, b, c))))
}

/// 2x2x2 average pooling.
pub fn avgpool2(g: &mut Graph, x: TensorId) -> TensorId {
    let xv = g.value_rc(x);
    let x4 = xv.view().into_dimensionality::<Ix4>().expect("avgpool input 4D");
    let (c, d, h, w) = x4.dim();
    assert!(d % 2 == 0 && h % 2 == 0 && w % 2 == 0, "avgpool needs even spatial dims");
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let mut out = Array4::<f32>::zeros((c, od, oh, ow));
    for ci in 0..c {
        for i in 0..od {
            for j in 0..oh {
                for kk in 0..ow {
                    let mut acc = 0.0f32;
                    for (a, b, cc) in itertools_cube() {
                        acc += x4[[ci, 2 * i + a, 2 * j + b, 2 * kk + cc]];
                    }
                    out[[ci, i, j, kk]] = acc / 8.0;
                }
            }
        }
    }
    let dims = (c, d, h, w);
    g.op(
        out.into_dyn(),
        Box::new(move |grad| {
            let g4 = as4(grad);
            let mut gx = Array4::<f32>::zeros(dims);
            for ci in 0..dims.0 {
                for i in 0..dims.1 / 2 {
                    for j in 0..dims.2 / 2 {
                        for kk in 0..dims.3 / 2 {
                            let v = g4[[ci, i, j, kk]] / 8.0;
                            for (a, b, cc) in itertools_cube() {
                                gx[[ci, 2 * i + a, 2 * j + b, 2 * kk + cc]] = v;
                            }
                        }
                    }
                }
            }
            vec![(x, gx.into_dyn())]
        }),
    )
}

/// Nearest-neighbor 2x upsampling of `(C,D,H,W)`.
pub fn upsample2(g: &mut Graph, x: TensorId) -> TensorId {
    let xv = g.value_rc(x);
    let x4 = xv.view().into_dimensionality::<Ix4>().expect("upsample input 4D");
    let (c, d, h, w) = x4.dim();
    let mut out = Array4::<f32>::zeros((c, 2 * d, 2 * h, 2 * w));
    for ci in 0..c {
        for i in 0..2 * d {
            for j in 0..2 * h {
                for kk in 0..2 * w {
                    out[[ci, i, j, kk]] = x4[[ci, i / 2, j / 2, kk / 2]];
                }
            }
        }
    }
    let dims = (c, d, h, w);
    g.op(
        out.into_dyn(),
        Box::new(move |grad| {
            let g4 = as4(grad);
            let mut gx = Array4::<f32>::zeros(dims);
            for ci in 0..dims.0 {
                for i in 0..2 * dims.1 {
                    for j in 0..2 * dims.2 {
                        for kk in 0..2 * dims.3 {
                            gx[[ci, i / 2, j / 2, kk / 2]] += g4[[ci, i, j, kk]];
                        }
                    }
                }
            }
            vec![(x, gx.into_dyn())]
        }),
    )
}

const NORM_EPS: f64 = 1e-5;

/// Instance norm over the spatial axes of `(C,...)` with per-channel scale
/// and shift.
pub fn instance_norm(g: &mut Graph, x: TensorId, gamma: TensorId, beta: TensorId) -> TensorId {
    let xv = g.value_rc(x);
    let gv = g.value_rc(gamma);
    let bv = g.value_rc(beta);
    let c = xv.shape()[0];
    let n: usize = xv.len() / c;

    let mut normalized = ArrayD::<f32>::zeros(xv.raw_dim());
    let mut inv_std = vec![0.0f32; c];
    for ci in 0..c {
        let lane = xv.slice_axis(ndarray::Axis(0), ndarray::Slice::from(ci..ci + 1));
        let mean = lane.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = lane.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        let istd = 1.0 / (var + NORM_EPS).sqrt();
        inv_std[ci] = istd as f32;
        let mut out_lane = normalized.slice_axis_mut(ndarray::Axis(0), ndarray::Slice::from(ci..ci + 1));
        for (o, &v) in out_lane.iter_mut().zip(lane.iter()) {
            *o = ((v as f64 - mean) * istd) as f32;
        }
    }
    let mut out = normalized.clone();
    for ci in 0..c {
        let (scale, shift) = (gv[[ci]], bv[[ci]]);
        out.slice_axis_mut(ndarray::Axis(0), ndarray::Slice::from(ci..ci + 1))
            .mapv_inplace(|v| v * scale + shift);
    }
    let xhat = Rc::new(normalized);
    g.op(
        out,
        Box::new(move |grad| {
            let mut gx = ArrayD::<f32>::zeros(grad.raw_dim());
            let mut ggamma = Array1::<f32>::zeros(c);
            let mut gbeta = Array1::<f32>::zeros(c);
            for ci in 0..c {
                let dy = grad.slice_axis(ndarray::Axis(0), ndarray::Slice::from(ci..ci + 1));
                let xh = xhat.slice_axis(ndarray::Axis(0), ndarray::Slice::from(ci..ci + 1));
                let sum_dy = dy.iter().map(|&v| v as f64).sum::<f64>();
                let sum_dy_xh = dy.iter().zip(xh.iter()).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>();
                ggamma[ci] = sum_dy_xh as f32;
                gbeta[ci] = sum_dy as f32;
                let scale = gv[[ci]] as f64 * inv_std[ci] as f64;
                let mean_dy = sum_dy / n as f64;
                let mean_dy_xh = sum_dy_xh / n as f64;
                let mut gx_lane = gx.slice_axis_mut(ndarray::Axis(0), ndarray::Slice::from(ci..ci + 1));
                for ((o, &dyv), &xhv) in gx_lane.iter_mut().zip(dy.iter()).zip(xh.iter()) {
                    *o = (scale * (dyv as f64 - mean_dy - xhv as f64 * mean_dy_xh)) as f32;
                }
            }
            vec![(x, gx), (gamma, ggamma.into_dyn()), (beta, gbeta.into_dyn())]
        }),
    )
}

/// Layer norm over the last axis of `(T,C)` tokens.
pub fn layer_norm(g: &mut Graph, x: TensorId, gamma: TensorId, beta: TensorId) -> TensorId {
    let xv = g.value_rc(x);
    let gv = g.value_rc(gamma);
    let bv = g.value_rc(beta);
    let x2 = xv.view().into_dimensionality::<Ix2>().expect("layer_norm input 2D");
    let (t, c) = x2.dim();

    let mut normalized = Array2::<f32>::zeros((t, c));
    let mut inv_std = vec![0.0f32; t];
    for ti in 0..t {
        let row = x2.row(ti);
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / c as f64;
        let istd = 1.0 / (var + NORM_EPS).sqrt();
        inv_std[ti] = istd as f32;
        for (o, &v) in normalized.row_mut(ti).iter_mut().zip(row.iter()) {
            *o = ((v as f64 - mean) * istd) as f32;
        }
    }
    let mut out = normalized.clone();
    for mut row in out.rows_mut() {
        for (ci, v) in row.iter_mut().enumerate() {
            *v = *v * gv[[ci]] + bv[[ci]];
        }
    }
    let xhat = Rc::new(normalized);
    g.op(
        out.into_dyn(),
        Box::new(move |grad| {
            let g2 = grad.view().into_dimensionality::<Ix2>().unwrap();
            let mut gx = Array2::<f32>::zeros((t, c));
            let mut ggamma = Array1::<f32>::zeros(c);
            let mut gbeta = Array1::<f32>::zeros(c);
            for ti in 0..t {
                let dy = g2.row(ti);
                let xh = xhat.row(ti);
                let mut sum_dyg = 0.0f64;
                let mut sum_dyg_xh = 0.0f64;
                for ci in 0..c {
                    let dyg = dy[ci] as f64 * gv[[ci]] as f64;
                    sum_dyg += dyg;
                    sum_dyg_xh += dyg * xh[ci] as f64;
                    ggamma[ci] += dy[ci] * xh[ci];
                    gbeta[ci] += dy[ci];
                }
                let istd = inv_std[ti] as f64;
                for ci in 0..c {
                    let dyg = dy[ci] as f64 * gv[[ci]] as f64;
                    gx[[ti, ci]] =
                        (istd * (dyg - sum_dyg / c as f64 - xh[ci] as f64 * sum_dyg_xh / c as f64)) as f32;
                }
            }
            vec![(x, gx.into_dyn()), (gamma, ggamma.into_dyn()), (beta, gbeta.into_dyn())]
        }),
    )
}

/// Softmax over the last axis.
pub fn softmax_last(g: &mut Graph, x: TensorId) -> TensorId {
    let xv = g.value_rc(x);
    let shape: Vec<usize> = xv.shape().to_vec();
    let c = *shape.last().expect("softmax needs at least 1 axis");
    let rows = xv.len() / c;
    let flat = xv.as_slice().expect("softmax input standard layout");
    let mut out = vec![0.0f32; xv.len()];
    for r in 0..rows {
        let row = &flat[r * c..(r + 1) * c];
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut denom = 0.0f64;
        for (o, &v) in out[r * c..(r + 1) * c].iter_mut().zip(row) {
            let e = ((v - max) as f64).exp();
            *o = e as f32;
            denom += e;
        }
        for o in out[r * c..(r + 1) * c].iter_mut() {
            *o = (*o as f64 / denom) as f32;
        }
    }
    let out = ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap();
    let yv = Rc::new(out.clone());
    g.op(
        out,
        Box::new(move |grad| {
            let y = yv.as_slice().unwrap();
            let dy = grad.as_slice().expect("softmax grad standard layout");
            let mut gx = vec![0.0f32; dy.len()];
            for r in 0..rows {
                let ys = &y[r * c..(r + 1) * c];
                let dys = &dy[r * c..(r + 1) * c];
                let dot: f64 = ys.iter().zip(dys).map(|(&a, &b)| a as f64 * b as f64).sum();
                for ci in 0..c {
                    gx[r * c + ci] = (ys[ci] as f64 * (dys[ci] as f64 - dot)) as f32;
                }
            }
            vec![(x, ArrayD::from_shape_vec(grad.raw_dim(), gx).unwrap())]
        }),
    )
}

/// Batched matmul: `(B,M,K) x (B,K,N) -> (B,M,N)`.
pub fn matmul3(g: &mut Graph, a: TensorId, b: TensorId) -> TensorId {
    let av = g.value_rc(a);
    let bv = g.value_rc(b);
    let a3 = av.view().into_dimensionality::<Ix3>().expect("matmul3 lhs 3D");
    let b3 = bv.view().into_dimensionality::<Ix3>().expect("matmul3 rhs 3D");
    let (nb, m, _k) = a3.dim();
    let n = b3.dim().2;
    let mut out = ndarray::Array3::<f32>::zeros((nb, m, n));
    for i in 0..nb {
        out.index_axis_mut(ndarray::Axis(0), i)
            .assign(&a3.index_axis(ndarray::Axis(0), i).dot(&b3.index_axis(ndarray::Axis(0), i)));
    }
    let (avc, bvc) = (Rc::clone(&av), Rc::clone(&bv));
    g.op(
        out.into_dyn(),
        Box::new(move |grad| {
            let g3 = grad.view().into_dimensionality::<Ix3>().unwrap();
            let a3 = avc.view().into_dimensionality::<Ix3>().unwrap();
            let b3 = bvc.view().into_dimensionality::<Ix3>().unwrap();
            let mut ga = ndarray::Array3::<f32>::zeros(a3.dim());
            let mut gb = ndarray::Array3::<f32>::zeros(b3.dim());
            for i in 0..a3.dim().0 {
                let gi = g3.index_axis(ndarray::Axis(0), i);
                ga.index_axis_mut(ndarray::Axis(0), i)
                    .assign(&gi.dot(&b3.index_axis(ndarray::Axis(0), i).t()));
                gb.index_axis_mut(ndarray::Axis(0), i)
                    .assign(&a3.index_axis(ndarray::Axis(0), i).t().dot(&gi));
            }
            vec![(a, ga.into_dyn()), (b, gb.into_dyn())]
        }),
    )
}

/// Reshape; total size must be preserved and the input standard layout.
pub fn reshape(g: &mut Graph, x: TensorId, shape: &[usize]) -> TensorId {
    let xv = g.value_rc(x);
    let old: Vec<usize> = xv.shape().to_vec();
    let out = xv
        .to_shape(IxDyn(shape))
        .expect("reshape size mismatch")
        .to_owned();
    g.op(
        out,
        Box::new(move |grad| {
            let back = grad.to_shape(IxDyn(&old)).expect("reshape backward").to_owned();
            vec![(x, back)]
        }),
    )
}

/// Axis permutation; backward applies the inverse permutation.
pub fn permute(g: &mut Graph, x: TensorId, order: &[usize]) -> TensorId {
    let xv = g.value_rc(x);
    let order_vec: Vec<usize> = order.to_vec();
    let out = xv
        .view()
        .permuted_axes(IxDyn(&order_vec))
        .as_standard_layout()
        .to_owned();
    let mut inverse = vec![0usize; order_vec.len()];
    for (i, &o) in order_vec.iter().enumerate() {
        inverse[o] = i;
    }
    g.op(
        out,
        Box::new(move |grad| {
            let back = grad
                .view()
                .permuted_axes(IxDyn(&inverse))
                .as_standard_layout()
                .to_owned();
            vec![(x, back)]
        }),
    )
}

/// Cyclic shift along one axis.
pub fn roll(g: &mut Graph, x: TensorId, axis: usize, shift: isize) -> TensorId {
    let xv = g.value_rc(x);
    let out = roll_array(&xv, axis, shift);
    g.op(out, Box::new(move |grad| vec![(x, roll_array(grad, axis, -shift))]))
}

pub(crate) fn roll_array(x: &ArrayD<f32>, axis: usize, shift: isize) -> ArrayD<f32> {
    let len = x.shape()[axis] as isize;
    let shift = ((shift % len) + len) % len;
    if shift == 0 {
        return x.clone();
    }
    let mut out = ArrayD::<f32>::zeros(x.raw_dim());
    let a = ndarray::Axis(axis);
    out.slice_axis_mut(a, ndarray::Slice::from(shift..))
        .assign(&x.slice_axis(a, ndarray::Slice::from(..len - shift)));
    out.slice_axis_mut(a, ndarray::Slice::from(..shift))
        .assign(&x.slice_axis(a, ndarray::Slice::from(len - shift..)));
    out
}

/// Mean over every axis but the first: `(C,...) -> (C)`.
pub fn global_avg_pool(g: &mut Graph, x: TensorId) -> TensorId {
    let xv = g.value_rc(x);
    let c = xv.shape()[0];
    let n = xv.len() / c;
    let mut out = Array1::<f32>::zeros(c);
    for ci in 0..c {
        let lane = xv.slice_axis(ndarray::Axis(0), ndarray::Slice::from(ci..ci + 1));
        out[ci] = (lane.iter().map(|&v| v as f64).sum::<f64>() / n as f64) as f32;
    }
    let shape: Vec<usize> = xv.shape().to_vec();
    g.op(
        out.into_dyn(),
        Box::new(move |grad| {
            let mut gx = ArrayD::<f32>::zeros(IxDyn(&shape));
            for ci in 0..c {
                let v = grad[[ci]] / n as f32;
                gx.slice_axis_mut(ndarray::Axis(0), ndarray::Slice::from(ci..ci + 1)).fill(v);
            }
            vec![(x, gx)]
        }),
    )
}
