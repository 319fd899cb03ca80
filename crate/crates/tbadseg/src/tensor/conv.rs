//! 3D convolution kernels (stride 1, odd kernel, "same" padding).
//!
//! Forward and both gradients reduce to per-slab im2col + sgemm, parallel
//! over the leading spatial axis. Cross-slab sums happen serially in fixed
//! order so results do not depend on thread scheduling.

use ndarray::{Array2, Array4, ArrayView4, ArrayViewMut2};
use rayon::prelude::*;

/// Gather one leading-axis slab into im2col layout `(C*k^3, S1*S2)`.
fn im2col_slab(x: &ArrayView4<f32>, s0: usize, k: usize, cols: &mut ArrayViewMut2<f32>) {
    let (c_in, d0, d1, d2) = x.dim();
    let pad = (k / 2) as isize;
    cols.fill(0.0);
    let mut row = 0usize;
    for c in 0..c_in {
        for k0 in 0..k {
            let src0 = s0 as isize + k0 as isize - pad;
            if src0 < 0 || src0 >= d0 as isize {
                row += k * k;
                continue;
            }
            for k1 in 0..k {
                for k2 in 0..k {
                    let off1 = k1 as isize - pad;
                    let off2 = k2 as isize - pad;
                    let mut cols_row = cols.row_mut(row);
                    let dst = cols_row.as_slice_mut().expect("cols row contiguous");
                    for s1 in 0..d1 {
                        let src1 = s1 as isize + off1;
                        if src1 < 0 || src1 >= d1 as isize {
                            continue;
                        }
                        // contiguous run along the innermost axis
                        let lo2 = (-off2).max(0) as usize;
                        let hi2 = (d2 as isize - off2).min(d2 as isize) as usize;
                        if lo2 >= hi2 {
                            continue;
                        }
                        let src = x.slice(ndarray::s![
                            c,
                            src0 as usize,
                            src1 as usize,
                            (lo2 as isize + off2) as usize..(hi2 as isize + off2) as usize
                        ]);
                        let src = src.to_slice().expect("input slab contiguous");
                        dst[s1 * d2 + lo2..s1 * d2 + hi2].copy_from_slice(src);
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Same-padding stride-1 conv with flattened weights `(O, C*k^3)`.
pub fn conv3d_raw(x: &ArrayView4<f32>, w2: &Array2<f32>, k: usize, bias: Option<&[f32]>) -> Array4<f32> {
    let (c_in, d0, d1, d2) = x.dim();
    let o = w2.dim().0;
    let ck = c_in * k * k * k;
    assert_eq!(w2.dim().1, ck, "weight columns must equal C*k^3");

    let slabs: Vec<Array2<f32>> = (0..d0)
        .into_par_iter()
        .map(|s0| {
            let mut cols = Array2::<f32>::zeros((ck, d1 * d2));
            im2col_slab(x, s0, k, &mut cols.view_mut());
            w2.dot(&cols)
        })
        .collect();

    let mut out = Array4::<f32>::zeros((o, d0, d1, d2));
    for (s0, slab) in slabs.into_iter().enumerate() {
        let reshaped = slab.into_shape_with_order((o, d1, d2)).expect("slab reshape");
        out.slice_mut(ndarray::s![.., s0, .., ..]).assign(&reshaped);
    }
    if let Some(b) = bias {
        for (oc, &bv) in b.iter().enumerate() {
            out.slice_mut(ndarray::s![oc, .., .., ..]).mapv_inplace(|v| v + bv);
        }
    }
    out
}

/// Convenience wrapper taking 5D weights `(O,C,k,k,k)`.
pub fn conv3d_forward(x: &Array4<f32>, w: &ndarray::Array5<f32>, bias: Option<&[f32]>) -> Array4<f32> {
    let (o, c, k, _, _) = w.dim();
    let w2 = w
        .view()
        .into_shape_with_order((o, c * k * k * k))
        .expect("weight view")
        .to_owned();
    conv3d_raw(&x.view(), &w2, k, bias)
}

/// Gradient wrt the input: correlation of `grad` with flipped weights.
pub fn conv3d_grad_input(grad: &Array4<f32>, w: &ndarray::Array5<f32>) -> Array4<f32> {
    let (o, c, k, _, _) = w.dim();
    let mut flipped = ndarray::Array5::<f32>::zeros((c, o, k, k, k));
    for oc in 0..o {
        for ic in 0..c {
            for a in 0..k {
                for b in 0..k {
                    for d in 0..k {
                        flipped[[ic, oc, k - 1 - a, k - 1 - b, k - 1 - d]] = w[[oc, ic, a, b, d]];
                    }
                }
            }
        }
    }
    conv3d_forward(grad, &flipped, None)
}

/// Gradient wrt the weights, returned as `(O,C,k,k,k)`.
pub fn conv3d_grad_weights(x: &Array4<f32>, grad: &Array4<f32>, k: usize) -> ndarray::Array5<f32> {
    let (c_in, d0, d1, d2) = x.dim();
    let o = grad.dim().0;
    let ck = c_in * k * k * k;
    let xv = x.view();

    let partials: Vec<Array2<f32>> = (0..d0)
        .into_par_iter()
        .map(|s0| {
            let mut cols = Array2::<f32>::zeros((ck, d1 * d2));
            im2col_slab(&xv, s0, k, &mut cols.view_mut());
            let g2 = grad
                .slice(ndarray::s![.., s0, .., ..])
                .to_shape((o, d1 * d2))
                .expect("grad slab reshape")
                .to_owned();
            g2.dot(&cols.t())
        })
        .collect();

    let mut acc = Array2::<f32>::zeros((o, ck));
    for p in partials {
        acc += &p;
    }
    acc.into_shape_with_order((o, c_in, k, k, k)).expect("weight grad reshape")
}

/// Gradient wrt the bias: sum of `grad` over spatial axes.
pub fn conv3d_grad_bias(grad: &Array4<f32>) -> Vec<f32> {
    let o = grad.dim().0;
    (0..o)
        .map(|oc| grad.slice(ndarray::s![oc, .., .., ..]).iter().map(|&v| v as f64).sum::<f64>() as f32)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array4, Array5};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand4(rng: &mut ChaCha8Rng, dim: (usize, usize, usize, usize)) -> Array4<f32> {
        Array4::from_shape_fn(dim, |_| rng.random_range(-1.0..1.0))
    }

    /// Direct triple-loop reference convolution.
    fn conv_reference(x: &Array4<f32>, w: &Array5<f32>, bias: Option<&[f32]>) -> Array4<f32> {
        let (c_in, d0, d1, d2) = x.dim();
        let (o, _, k, _, _) = w.dim();
        let pad = (k / 2) as isize;
        let mut out = Array4::<f32>::zeros((o, d0, d1, d2));
        for oc in 0..o {
            for s0 in 0..d0 {
                for s1 in 0..d1 {
                    for s2 in 0..d2 {
                        let mut acc = bias.map(|b| b[oc]).unwrap_or(0.0) as f64;
                        for c in 0..c_in {
                            for k0 in 0..k {
                                for k1 in 0..k {
                                    for k2 in 0..k {
                                        let i0 = s0 as isize + k0 as isize - pad;
                                        let i1 = s1 as isize + k1 as isize - pad;
                                        let i2 = s2 as isize + k2 as isize - pad;
                                        if i0 < 0 || i1 < 0 || i2 < 0 {
                                            continue;
                                        }
                                        let (i0, i1, i2) = (i0 as usize, i1 as usize, i2 as usize);
                                        if i0 >= d0 || i1 >= d1 || i2 >= d2 {
                                            continue;
                                        }
                                        acc += (x[[c, i0, i1, i2]] * w[[oc, c, k0, k1, k2]]) as f64;
                                    }
                                }
                            }
                        }
                        out[[oc, s0, s1, s2]] = acc as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(c, o, k, d) in &[(1usize, 2usize, 3usize, 5usize), (3, 4, 3, 6), (2, 3, 1, 4)] {
            let x = rand4(&mut rng, (c, d, d + 1, d + 2));
            let w = Array5::from_shape_fn((o, c, k, k, k), |_| rng.random_range(-1.0f32..1.0));
            let bias: Vec<f32> = (0..o).map(|_| rng.random_range(-0.5..0.5)).collect();
            let fast = conv3d_forward(&x, &w, Some(&bias));
            let slow = conv_reference(&x, &w, Some(&bias));
            let max_err = fast
                .iter()
                .zip(slow.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(max_err < 1e-4, "c={c} o={o} k={k}: max err {max_err}");
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand4(&mut rng, (2, 4, 4, 4));
        let w = Array5::from_shape_fn((3, 2, 3, 3, 3), |_| rng.random_range(-0.5f32..0.5));
        // scalar objective: sum of outputs
        let grad = Array4::from_elem((3, 4, 4, 4), 1.0f32);
        let gx = conv3d_grad_input(&grad, &w);
        let eps = 1e-2f32;
        for &idx in &[[0usize, 0, 0, 0], [1, 2, 3, 1], [0, 3, 0, 2]] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let fp: f32 = conv3d_forward(&xp, &w, None).sum();
            let fm: f32 = conv3d_forward(&xm, &w, None).sum();
            let num = (fp - fm) / (2.0 * eps);
            assert!((gx[idx] - num).abs() < 1e-2, "idx {idx:?}: {} vs {num}", gx[idx]);
        }
    }

    #[test]
    fn weight_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand4(&mut rng, (2, 4, 4, 4));
        let w = Array5::from_shape_fn((2, 2, 3, 3, 3), |_| rng.random_range(-0.5f32..0.5));
        let grad = Array4::from_elem((2, 4, 4, 4), 1.0f32);
        let gw = conv3d_grad_weights(&x, &grad, 3);
        let eps = 1e-2f32;
        for &idx in &[[0usize, 0, 0, 0, 0], [1, 1, 2, 1, 0], [0, 1, 1, 1, 1]] {
            let mut wp = w.clone();
            wp[idx] += eps;
            let mut wm = w.clone();
            wm[idx] -= eps;
            let fp: f32 = conv3d_forward(&x, &wp, None).sum();
            let fm: f32 = conv3d_forward(&x, &wm, None).sum();
            let num = (fp - fm) / (2.0 * eps);
            assert!((gw[idx] - num).abs() < 1e-2, "idx {idx:?}: {} vs {num}", gw[idx]);
        }
    }

    #[test]
    fn bias_gradient_is_spatial_sum() {
        let grad = Array4::from_elem((2, 3, 3, 3), 0.5f32);
        let gb = conv3d_grad_bias(&grad);
        assert_eq!(gb.len(), 2);
        for v in gb {
            assert!((v - 13.5).abs() < 1e-5);
        }
    }
}
