//! 2-D convolution and the spatial ops used by the UNet and classifier.
//!
//! Convolution is im2col + matmul, parallel over the batch. Weight gradients
//! are accumulated in batch order so results stay bitwise reproducible
//! regardless of thread count.

use rayon::prelude::*;
use std::rc::Rc;

use super::ops::{mm, mm_nt, mm_tn};
use super::{invalid, Element, Tensor, TensorError, TensorResult};

#[derive(Clone, Copy)]
struct ConvGeom {
    batch: usize,
    in_ch: usize,
    h: usize,
    w: usize,
    out_ch: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn resolve<T: Element>(
        x: &Tensor<T>,
        weight: &Tensor<T>,
        stride: usize,
        pad: usize,
    ) -> TensorResult<Self> {
        let xs = x.shape();
        let ws = weight.shape();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(invalid(
                "conv2d",
                format!("expected x[B,C,H,W] and w[F,C,kh,kw], got {:?} and {:?}", xs, ws),
            ));
        }
        let (batch, in_ch, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (out_ch, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wc != in_ch {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        if stride == 0 {
            return Err(invalid("conv2d", "stride must be positive"));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(invalid(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
            ));
        }
        if (h + 2 * pad - kh) % stride != 0 || (w + 2 * pad - kw) % stride != 0 {
            return Err(invalid(
                "conv2d",
                format!(
                    "non-integral output extent: input {h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {pad}"
                ),
            ));
        }
        Ok(ConvGeom {
            batch,
            in_ch,
            h,
            w,
            out_ch,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn out_px(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfold one image `[C,H,W]` into `[C·kh·kw, oh·ow]`.
fn im2col<T: Element>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let (h, w) = (g.h as i64, g.w as i64);
    let mut row = 0usize;
    for c in 0..g.in_ch {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut col[row * g.out_px()..(row + 1) * g.out_px()];
                let mut o = 0usize;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as i64 - g.pad as i64;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as i64 - g.pad as i64;
                        dst[o] = if iy >= 0 && iy < h && ix >= 0 && ix < w {
                            plane[(iy as usize) * g.w + ix as usize]
                        } else {
                            T::ZERO
                        };
                        o += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Fold `[C·kh·kw, oh·ow]` gradients back onto one image.
fn col2im<T: Element>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (h, w) = (g.h as i64, g.w as i64);
    let mut row = 0usize;
    for c in 0..g.in_ch {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &col[row * g.out_px()..(row + 1) * g.out_px()];
                let mut o = 0usize;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as i64 - g.pad as i64;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as i64 - g.pad as i64;
                        if iy >= 0 && iy < h && ix >= 0 && ix < w {
                            dx[c * g.h * g.w + (iy as usize) * g.w + ix as usize] += src[o];
                        }
                        o += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

impl<T: Element> Tensor<T> {
    /// 2-D convolution: `x[B,C,H,W] ⊛ w[F,C,kh,kw] (+ bias[F])`.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        pad: usize,
    ) -> TensorResult<Tensor<T>> {
        let geom = ConvGeom::resolve(self, weight, stride, pad)?;
        if let Some(b) = bias {
            if b.dims() != [geom.out_ch] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![geom.out_ch],
                    rhs: b.shape(),
                });
            }
        }
        let per_in = geom.in_ch * geom.h * geom.w;
        let per_out = geom.out_ch * geom.out_px();
        let mut out = vec![T::ZERO; geom.batch * per_out];
        {
            let xd = self.data();
            let wd = weight.data();
            let xs: &[T] = &xd;
            let ws: &[T] = &wd;
            out.par_chunks_mut(per_out.max(1))
                .enumerate()
                .for_each(|(b, dst)| {
                    let mut col = vec![T::ZERO; geom.col_rows() * geom.out_px()];
                    im2col(&xs[b * per_in..(b + 1) * per_in], &geom, &mut col);
                    let y = mm(ws, &col, geom.out_ch, geom.col_rows(), geom.out_px());
                    dst.copy_from_slice(&y);
                });
            if let Some(bt) = bias {
                let bd = bt.data();
                for b in 0..geom.batch {
                    for f in 0..geom.out_ch {
                        let base = b * per_out + f * geom.out_px();
                        let bv = bd[f];
                        for v in &mut out[base..base + geom.out_px()] {
                            *v += bv;
                        }
                    }
                }
            }
        }

        let x = self.clone();
        let w = weight.clone();
        let has_bias = bias.is_some();
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Tensor::from_op_checked(
            out,
            vec![geom.batch, geom.out_ch, geom.oh, geom.ow],
            parents,
            move |gout, needs| {
                let xd = x.data();
                let wd = w.data();
                let xs: &[T] = &xd;
                let ws: &[T] = &wd;

                let dx = needs[0].then(|| {
                    let mut dx = vec![T::ZERO; xs.len()];
                    dx.par_chunks_mut(per_in.max(1)).enumerate().for_each(|(b, dxb)| {
                        let gy = &gout[b * per_out..(b + 1) * per_out];
                        let dcol = mm_tn(ws, gy, geom.out_ch, geom.col_rows(), geom.out_px());
                        col2im(&dcol, &geom, dxb);
                    });
                    dx
                });

                let dw = needs[1].then(|| {
                    // per-batch partials summed in batch order
                    let partials: Vec<Vec<T>> = (0..geom.batch)
                        .into_par_iter()
                        .map(|b| {
                            let mut col = vec![T::ZERO; geom.col_rows() * geom.out_px()];
                            im2col(&xs[b * per_in..(b + 1) * per_in], &geom, &mut col);
                            let gy = &gout[b * per_out..(b + 1) * per_out];
                            mm_nt(gy, &col, geom.out_ch, geom.out_px(), geom.col_rows())
                        })
                        .collect();
                    let mut dw = vec![T::ZERO; ws.len()];
                    for p in partials {
                        for (a, b) in dw.iter_mut().zip(p) {
                            *a += b;
                        }
                    }
                    dw
                });

                let mut grads = vec![dx, dw];
                if has_bias {
                    let db = needs[2].then(|| {
                        let mut db = vec![T::ZERO; geom.out_ch];
                        for b in 0..geom.batch {
                            for f in 0..geom.out_ch {
                                let base = b * per_out + f * geom.out_px();
                                for &gv in &gout[base..base + geom.out_px()] {
                                    db[f] += gv;
                                }
                            }
                        }
                        db
                    });
                    grads.push(db);
                }
                grads
            },
        )
    }

    /// Per-(batch, channel) affine over the spatial extent:
    /// `y[b,c,:,:] = scale[b,c]·x[b,c,:,:] + shift[b,c]`.
    pub fn channel_scale_shift(
        &self,
        scale: &Tensor<T>,
        shift: &Tensor<T>,
    ) -> TensorResult<Tensor<T>> {
        let xs = self.shape();
        if xs.len() != 4 {
            return Err(invalid("channel_scale_shift", format!("expected [B,C,H,W], got {:?}", xs)));
        }
        let (bsz, ch, sp) = (xs[0], xs[1], xs[2] * xs[3]);
        for t in [scale, shift] {
            if t.dims() != [bsz, ch] {
                return Err(TensorError::ShapeMismatch {
                    op: "channel_scale_shift",
                    lhs: vec![bsz, ch],
                    rhs: t.shape(),
                });
            }
        }
        let mut out = vec![T::ZERO; self.numel()];
        {
            let xd = self.data();
            let sd = scale.data();
            let bd = shift.data();
            for bc in 0..bsz * ch {
                let (s, b) = (sd[bc], bd[bc]);
                for (o, &v) in out[bc * sp..(bc + 1) * sp].iter_mut().zip(&xd[bc * sp..(bc + 1) * sp]) {
                    *o = s * v + b;
                }
            }
        }
        let x = self.clone();
        let sc = scale.clone();
        Tensor::from_op_checked(
            out,
            xs,
            vec![self.clone(), scale.clone(), shift.clone()],
            move |g, needs| {
                let xd = x.data();
                let sd = sc.data();
                let dx = needs[0].then(|| {
                    let mut dx = vec![T::ZERO; xd.len()];
                    for bc in 0..bsz * ch {
                        let s = sd[bc];
                        for (o, &gv) in dx[bc * sp..(bc + 1) * sp].iter_mut().zip(&g[bc * sp..(bc + 1) * sp]) {
                            *o = gv * s;
                        }
                    }
                    dx
                });
                let ds = needs[1].then(|| {
                    let mut ds = vec![T::ZERO; bsz * ch];
                    for bc in 0..bsz * ch {
                        let mut acc = T::ZERO;
                        for (&gv, &xv) in g[bc * sp..(bc + 1) * sp].iter().zip(&xd[bc * sp..(bc + 1) * sp]) {
                            acc += gv * xv;
                        }
                        ds[bc] = acc;
                    }
                    ds
                });
                let db = needs[2].then(|| {
                    let mut db = vec![T::ZERO; bsz * ch];
                    for bc in 0..bsz * ch {
                        let mut acc = T::ZERO;
                        for &gv in &g[bc * sp..(bc + 1) * sp] {
                            acc += gv;
                        }
                        db[bc] = acc;
                    }
                    db
                });
                vec![dx, ds, db]
            },
        )
    }

    /// Nearest-neighbor 2x upsampling of `[B,C,H,W]`.
    pub fn upsample_nearest2(&self) -> TensorResult<Tensor<T>> {
        let xs = self.shape();
        if xs.len() != 4 {
            return Err(invalid("upsample", format!("expected [B,C,H,W], got {:?}", xs)));
        }
        let (bsz, ch, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h * 2, w * 2);
        let mut idx = Vec::with_capacity(bsz * ch * oh * ow);
        for bc in 0..bsz * ch {
            let base = bc * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    idx.push(base + (oy / 2) * w + ox / 2);
                }
            }
        }
        Ok(self.gather_flat(Rc::new(idx), vec![bsz, ch, oh, ow]))
    }

    /// Mean over the spatial extent: `[B,C,H,W] -> [B,C]`.
    pub fn global_avg_pool(&self) -> TensorResult<Tensor<T>> {
        let xs = self.shape();
        if xs.len() != 4 {
            return Err(invalid("global_avg_pool", format!("expected [B,C,H,W], got {:?}", xs)));
        }
        let (bsz, ch, sp) = (xs[0], xs[1], xs[2] * xs[3]);
        let inv = T::from_f64(1.0 / sp as f64);
        let mut out = vec![T::ZERO; bsz * ch];
        {
            let xd = self.data();
            for (bc, o) in out.iter_mut().enumerate() {
                let mut acc = T::ZERO;
                for &v in &xd[bc * sp..(bc + 1) * sp] {
                    acc += v;
                }
                *o = acc * inv;
            }
        }
        Ok(Tensor::from_op(
            out,
            vec![bsz, ch],
            vec![self.clone()],
            move |g, needs| {
                if !needs[0] {
                    return vec![None];
                }
                let mut dx = vec![T::ZERO; bsz * ch * sp];
                for bc in 0..bsz * ch {
                    let gv = g[bc] * inv;
                    for o in &mut dx[bc * sp..(bc + 1) * sp] {
                        *o = gv;
                    }
                }
                vec![Some(dx)]
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_ones_kernel_sums_input() {
        let x = Tensor::<f64>::from_vec((1..=9).map(f64::from).collect(), &[1, 1, 3, 3]).unwrap();
        let w = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let y = x.conv2d(&w, None, 1, 0).unwrap();
        assert_eq!(y.dims(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 45.0);
    }

    #[test]
    fn delta_impulse_reproduces_kernel() {
        // impulse at the center of a 5x5 image, 3x3 kernel, same-padding
        let mut img = vec![0.0f64; 25];
        img[12] = 1.0;
        let x = Tensor::from_vec(img, &[1, 1, 5, 5]).unwrap();
        let w = Tensor::from_vec((1..=9).map(f64::from).collect(), &[1, 1, 3, 3]).unwrap();
        let y = x.conv2d(&w, None, 1, 1).unwrap();
        let yd = y.to_vec();
        // kernel appears centered at the impulse, flipped by correlation indexing
        for ky in 0..3 {
            for kx in 0..3 {
                let v = yd[(1 + ky) * 5 + (1 + kx)];
                assert_eq!(v, (8 - (ky * 3 + kx)) as f64 + 1.0);
            }
        }
    }

    #[test]
    fn non_integral_output_extent_is_an_error() {
        let x = Tensor::<f64>::zeros(&[1, 1, 5, 5]);
        let w = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        let err = x.conv2d(&w, None, 2, 0).unwrap_err();
        assert!(err.to_string().contains("non-integral"), "{err}");
    }

    #[test]
    fn upsample_then_pool_is_identity_on_mean() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]).unwrap();
        let up = x.upsample_nearest2().unwrap();
        assert_eq!(up.dims(), &[1, 1, 4, 4]);
        let m = up.global_avg_pool().unwrap();
        assert!((m.to_vec()[0] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn channel_scale_shift_definition() {
        let f = Tensor::<f64>::ones(&[1, 2, 2, 2]);
        let s = Tensor::<f64>::from_vec(vec![2.0, -1.0], &[1, 2]).unwrap();
        let b = Tensor::<f64>::from_vec(vec![0.5, 0.0], &[1, 2]).unwrap();
        let y = f.channel_scale_shift(&s, &b).unwrap();
        let yd = y.to_vec();
        assert!(yd[..4].iter().all(|&v| v == 2.5));
        assert!(yd[4..].iter().all(|&v| v == -1.0));
    }
}
