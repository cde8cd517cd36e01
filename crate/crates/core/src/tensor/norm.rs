//! Fused layer/group normalization with hand-derived backward rules.

use super::{invalid, Element, Tensor, TensorError, TensorResult};

/// Shared slice-wise normalization core. `slices` enumerates disjoint index
/// ranges that are normalized together; `gain_index(i)` maps a flat element
/// index to its affine-parameter index.
fn norm_impl<T: Element>(
    op: &'static str,
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: f64,
    slice_len: usize,
    gain_index: impl Fn(usize) -> usize + 'static,
) -> TensorResult<Tensor<T>> {
    if eps <= 0.0 {
        return Err(invalid(op, format!("eps must be positive, got {eps}")));
    }
    let n = x.numel();
    debug_assert_eq!(n % slice_len, 0);
    let n_slices = n / slice_len;
    let inv_len = 1.0 / slice_len as f64;

    let mut xhat = vec![T::ZERO; n];
    let mut inv_sigma = vec![T::ZERO; n_slices];
    {
        let xd = x.data();
        for s in 0..n_slices {
            let xs = &xd[s * slice_len..(s + 1) * slice_len];
            let mut mean = 0.0;
            for &v in xs {
                mean += v.to_f64();
            }
            mean *= inv_len;
            let mut var = 0.0;
            for &v in xs {
                let d = v.to_f64() - mean;
                var += d * d;
            }
            var *= inv_len;
            let is = 1.0 / (var + eps).sqrt();
            inv_sigma[s] = T::from_f64(is);
            for (o, &v) in xhat[s * slice_len..(s + 1) * slice_len].iter_mut().zip(xs) {
                *o = T::from_f64((v.to_f64() - mean) * is);
            }
        }
    }

    let mut out = vec![T::ZERO; n];
    {
        let gd = gain.data();
        let bd = bias.data();
        for (i, o) in out.iter_mut().enumerate() {
            let gi = gain_index(i);
            *o = gd[gi] * xhat[i] + bd[gi];
        }
    }

    let g_len = gain.numel();
    let gain_t = gain.clone();
    let shape = x.shape();
    Tensor::from_op_checked(
        out,
        shape,
        vec![x.clone(), gain.clone(), bias.clone()],
        move |g, needs| {
            let dgain = needs[1].then(|| {
                let mut dg = vec![T::ZERO; g_len];
                for (i, (&gv, &xh)) in g.iter().zip(&xhat).enumerate() {
                    dg[gain_index(i)] += gv * xh;
                }
                dg
            });
            let dbias = needs[2].then(|| {
                let mut db = vec![T::ZERO; g_len];
                for (i, &gv) in g.iter().enumerate() {
                    db[gain_index(i)] += gv;
                }
                db
            });
            let dx = needs[0].then(|| {
                let gd = gain_t.data();
                let inv_len_t = T::from_f64(inv_len);
                let mut dx = vec![T::ZERO; g.len()];
                for s in 0..n_slices {
                    let range = s * slice_len..(s + 1) * slice_len;
                    // dxhat = g * gain
                    let mut mean_dxh = T::ZERO;
                    let mut mean_dxh_xh = T::ZERO;
                    for i in range.clone() {
                        let dxh = g[i] * gd[gain_index(i)];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xhat[i];
                    }
                    mean_dxh = mean_dxh * inv_len_t;
                    mean_dxh_xh = mean_dxh_xh * inv_len_t;
                    let is = inv_sigma[s];
                    for i in range {
                        let dxh = g[i] * gd[gain_index(i)];
                        dx[i] = (dxh - mean_dxh - xhat[i] * mean_dxh_xh) * is;
                    }
                }
                dx
            });
            vec![dx, dgain, dbias]
        },
    )
}

/// Layer normalization over the last axis.
pub fn layer_norm<T: Element>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: f64,
) -> TensorResult<Tensor<T>> {
    let shape = x.shape();
    let Some(&d) = shape.last() else {
        return Err(invalid("layer_norm", "zero-rank input"));
    };
    for t in [gain, bias] {
        if t.dims() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: vec![d],
                rhs: t.shape(),
            });
        }
    }
    norm_impl("layer_norm", x, gain, bias, eps, d, move |i| i % d)
}

/// Group normalization over `[B,C,H,W]` with `groups` channel groups.
pub fn group_norm<T: Element>(
    x: &Tensor<T>,
    groups: usize,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: f64,
) -> TensorResult<Tensor<T>> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(invalid("group_norm", format!("expected [B,C,H,W], got {:?}", shape)));
    }
    let (c, sp) = (shape[1], shape[2] * shape[3]);
    if groups == 0 || c % groups != 0 {
        return Err(invalid(
            "group_norm",
            format!("groups {groups} must divide channels {c}"),
        ));
    }
    for t in [gain, bias] {
        if t.dims() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "group_norm",
                lhs: vec![c],
                rhs: t.shape(),
            });
        }
    }
    let ch_per_group = c / groups;
    let slice_len = ch_per_group * sp;
    // flat index -> channel: slices run (batch, group)-major, so channel is
    // recovered from position within the [C,H,W] block of each batch element.
    let per_image = c * sp;
    norm_impl("group_norm", x, gain, bias, eps, slice_len, move |i| {
        (i % per_image) / sp
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input_normalizes_to_zero() {
        let x = Tensor::<f64>::full(&[2, 4], 3.25);
        let gain = Tensor::ones(&[4]);
        let bias = Tensor::zeros(&[4]);
        let y = layer_norm(&x, &gain, &bias, 1e-5).unwrap();
        assert!(y.to_vec().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn two_point_row_normalizes_to_plus_minus_one() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 3.0], &[1, 2]).unwrap();
        let y = layer_norm(&x, &Tensor::ones(&[2]), &Tensor::zeros(&[2]), 1e-12).unwrap();
        let d = y.to_vec();
        assert!((d[0] + 1.0).abs() < 1e-5 && (d[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn group_norm_slice_moments() {
        let mut rng = crate::rng::from_seed(3);
        let x = Tensor::<f64>::randn(&[2, 4, 3, 3], &mut rng);
        let y = group_norm(&x, 2, &Tensor::ones(&[4]), &Tensor::zeros(&[4]), 1e-10).unwrap();
        let d = y.to_vec();
        let slice = 2 * 9; // channels-per-group * spatial
        for s in 0..d.len() / slice {
            let xs = &d[s * slice..(s + 1) * slice];
            let mean: f64 = xs.iter().sum::<f64>() / slice as f64;
            let var: f64 = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / slice as f64;
            assert!(mean.abs() < 1e-9, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn rejects_bad_eps_and_groups() {
        let x = Tensor::<f64>::zeros(&[1, 4, 2, 2]);
        let g = Tensor::ones(&[4]);
        let b = Tensor::zeros(&[4]);
        assert!(group_norm(&x, 2, &g, &b, 0.0).is_err());
        assert!(group_norm(&x, 3, &g, &b, 1e-5).is_err());
    }
}
