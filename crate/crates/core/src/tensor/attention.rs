//! Fused scaled-dot-product attention.

use super::ops::{mm, mm_nt, mm_tn};
use super::{invalid, Element, Tensor, TensorError, TensorResult};

/// `softmax(q·kᵀ/√dh)·v` over `[B, heads, n, dh]` inputs.
///
/// The attention matrix rows are a probability distribution, so each output
/// row is a convex combination of the rows of `v`.
pub fn softmax_attention<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> TensorResult<Tensor<T>> {
    let shape = q.shape();
    if shape.len() != 4 {
        return Err(invalid(
            "attention",
            format!("expected [B,heads,n,dh], got {:?}", shape),
        ));
    }
    for t in [k, v] {
        if t.dims() != shape.as_slice() {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                lhs: shape,
                rhs: t.shape(),
            });
        }
    }
    let (b, h, n, dh) = (shape[0], shape[1], shape[2], shape[3]);
    let heads = b * h;
    let scale = 1.0 / (dh as f64).sqrt();
    let scale_t = T::from_f64(scale);

    let mut out = vec![T::ZERO; q.numel()];
    let mut probs = vec![T::ZERO; heads * n * n];
    {
        let qd = q.data();
        let kd = k.data();
        let vd = v.data();
        for hh in 0..heads {
            let qh = &qd[hh * n * dh..(hh + 1) * n * dh];
            let kh = &kd[hh * n * dh..(hh + 1) * n * dh];
            let vh = &vd[hh * n * dh..(hh + 1) * n * dh];
            let mut scores = mm_nt(qh, kh, n, dh, n);
            for s in scores.iter_mut() {
                *s = *s * scale_t;
            }
            let p = &mut probs[hh * n * n..(hh + 1) * n * n];
            for r in 0..n {
                softmax_row_inplace(&mut scores[r * n..(r + 1) * n]);
            }
            p.copy_from_slice(&scores);
            let o = mm(p, vh, n, n, dh);
            out[hh * n * dh..(hh + 1) * n * dh].copy_from_slice(&o);
        }
    }

    let (qt, kt, vt) = (q.clone(), k.clone(), v.clone());
    Tensor::from_op_checked(
        out,
        q.shape(),
        vec![q.clone(), k.clone(), v.clone()],
        move |g, needs| {
            let qd = qt.data();
            let kd = kt.data();
            let vd = vt.data();
            let mut dq = needs[0].then(|| vec![T::ZERO; qd.len()]);
            let mut dk = needs[1].then(|| vec![T::ZERO; kd.len()]);
            let mut dv = needs[2].then(|| vec![T::ZERO; vd.len()]);
            for hh in 0..heads {
                let p = &probs[hh * n * n..(hh + 1) * n * n];
                let go = &g[hh * n * dh..(hh + 1) * n * dh];
                if let Some(dv) = dv.as_mut() {
                    let d = mm_tn(p, go, n, n, dh);
                    dv[hh * n * dh..(hh + 1) * n * dh].copy_from_slice(&d);
                }
                if dq.is_some() || dk.is_some() {
                    let vh = &vd[hh * n * dh..(hh + 1) * n * dh];
                    let mut ds = mm_nt(go, vh, n, dh, n); // dP
                    for r in 0..n {
                        let pr = &p[r * n..(r + 1) * n];
                        let dsr = &mut ds[r * n..(r + 1) * n];
                        let mut dot = T::ZERO;
                        for (&pi, &di) in pr.iter().zip(dsr.iter()) {
                            dot += pi * di;
                        }
                        for (d, &pi) in dsr.iter_mut().zip(pr) {
                            *d = pi * (*d - dot) * scale_t;
                        }
                    }
                    if let Some(dq) = dq.as_mut() {
                        let kh = &kd[hh * n * dh..(hh + 1) * n * dh];
                        let d = mm(&ds, kh, n, n, dh);
                        dq[hh * n * dh..(hh + 1) * n * dh].copy_from_slice(&d);
                    }
                    if let Some(dk) = dk.as_mut() {
                        let qh = &qd[hh * n * dh..(hh + 1) * n * dh];
                        let d = mm_tn(&ds, qh, n, n, dh);
                        dk[hh * n * dh..(hh + 1) * n * dh].copy_from_slice(&d);
                    }
                }
            }
            vec![dq, dk, dv]
        },
    )
}

fn softmax_row_inplace<T: Element>(row: &mut [T]) {
    let mut mx = row[0];
    for &v in row.iter() {
        mx = mx.maximum(v);
    }
    let mut sum = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::from_seed;

    #[test]
    fn single_token_returns_v() {
        let mut rng = from_seed(1);
        let q = Tensor::<f64>::randn(&[1, 2, 1, 4], &mut rng);
        let k = Tensor::<f64>::randn(&[1, 2, 1, 4], &mut rng);
        let v = Tensor::<f64>::randn(&[1, 2, 1, 4], &mut rng);
        let o = softmax_attention(&q, &k, &v).unwrap();
        for (a, b) in o.to_vec().iter().zip(v.to_vec()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_keys_average_values() {
        let mut rng = from_seed(2);
        let q = Tensor::<f64>::randn(&[1, 1, 3, 2], &mut rng);
        let k = Tensor::<f64>::ones(&[1, 1, 3, 2]);
        let v = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[1, 1, 3, 2]).unwrap();
        let o = softmax_attention(&q, &k, &v).unwrap();
        let d = o.to_vec();
        for r in 0..3 {
            assert!((d[r * 2] - 3.0).abs() < 1e-12);
            assert!((d[r * 2 + 1] - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_scalar_oracle_on_small_case() {
        let mut rng = from_seed(3);
        let q = Tensor::<f64>::randn(&[1, 1, 3, 2], &mut rng);
        let k = Tensor::<f64>::randn(&[1, 1, 3, 2], &mut rng);
        let v = Tensor::<f64>::randn(&[1, 1, 3, 2], &mut rng);
        let o = softmax_attention(&q, &k, &v).unwrap();

        // explicit softmax(q·kᵀ/√dh)·v computed with scalar loops
        let (qd, kd, vd) = (q.to_vec(), k.to_vec(), v.to_vec());
        let scale = 1.0 / (2.0f64).sqrt();
        let mut expected = vec![0.0; 6];
        for i in 0..3 {
            let mut s = [0.0; 3];
            for (j, sv) in s.iter_mut().enumerate() {
                *sv = (qd[i * 2] * kd[j * 2] + qd[i * 2 + 1] * kd[j * 2 + 1]) * scale;
            }
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for d in 0..2 {
                expected[i * 2 + d] =
                    (0..3).map(|j| exps[j] / z * vd[j * 2 + d]).sum::<f64>();
            }
        }
        for (a, b) in o.to_vec().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn rows_sum_to_one_via_uniform_values() {
        // with v = all ones, the output equals the attention row sums
        let mut rng = from_seed(4);
        let q = Tensor::<f64>::randn(&[2, 2, 5, 3], &mut rng);
        let k = Tensor::<f64>::randn(&[2, 2, 5, 3], &mut rng);
        let v = Tensor::<f64>::ones(&[2, 2, 5, 3]);
        let o = softmax_attention(&q, &k, &v).unwrap();
        for &x in o.to_vec().iter() {
            assert!((x - 1.0).abs() < 1e-12);
        }
    }
}
