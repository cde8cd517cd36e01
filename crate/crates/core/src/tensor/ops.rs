//! Elementwise ops, reductions, shape ops, matrix multiplication, and losses.

use rayon::prelude::*;

use super::{broadcast_kind, cast, invalid, Broadcast, Element, Tensor, TensorError, TensorResult};

// Parallelize only when the row work is worth the fork overhead.
const PAR_THRESHOLD: usize = 16 * 1024;

#[inline]
fn sigmoid<T: Element>(x: T) -> T {
    T::ONE / (T::ONE + (-x).exp())
}

impl<T: Element> Tensor<T> {
    fn unary(
        &self,
        f: impl Fn(T) -> T,
        // receives (input, output), returns d out / d in
        df: impl Fn(T, T) -> T + 'static,
    ) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|&v| f(v)).collect();
        let x = self.clone();
        let y_data = out.clone();
        Tensor::from_op(out, self.shape(), vec![self.clone()], move |g, needs| {
            if !needs[0] {
                return vec![None];
            }
            let xd = x.data();
            let dg = g
                .iter()
                .zip(xd.iter().zip(y_data.iter()))
                .map(|(&gi, (&xi, &yi))| gi * df(xi, yi))
                .collect();
            vec![Some(dg)]
        })
    }

    fn binary(
        &self,
        op: &'static str,
        other: &Tensor<T>,
        f: impl Fn(T, T) -> T,
        dfa: impl Fn(T, T) -> T + 'static,
        dfb: impl Fn(T, T) -> T + 'static,
    ) -> TensorResult<Tensor<T>> {
        let kind = broadcast_kind(op, self, other)?;
        let (a, b) = (self.clone(), other.clone());
        let out: Vec<T> = {
            let ad = a.data();
            let bd = b.data();
            match kind {
                Broadcast::Equal => ad.iter().zip(bd.iter()).map(|(&x, &y)| f(x, y)).collect(),
                Broadcast::ScalarLhs => bd.iter().map(|&y| f(ad[0], y)).collect(),
                Broadcast::ScalarRhs => ad.iter().map(|&x| f(x, bd[0])).collect(),
            }
        };
        let shape = match kind {
            Broadcast::ScalarLhs => other.shape(),
            _ => self.shape(),
        };
        Tensor::from_op_checked(
            out,
            shape,
            vec![self.clone(), other.clone()],
            move |g, needs| {
                let ad = a.data();
                let bd = b.data();
                let da = needs[0].then(|| match kind {
                    Broadcast::Equal | Broadcast::ScalarRhs => g
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)|

                            gi * dfa(ad[i], if kind == Broadcast::Equal { bd[i] } else { bd[0] }))
                        .collect(),
                    Broadcast::ScalarLhs => {
                        let mut acc = T::ZERO;
                        for (i, &gi) in g.iter().enumerate() {
                            acc += gi * dfa(ad[0], bd[i]);
                        }
                        vec![acc]
                    }
                });
                let db = needs[1].then(|| match kind {
                    Broadcast::Equal | Broadcast::ScalarLhs => g
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| {
                            gi * dfb(if kind == Broadcast::Equal { ad[i] } else { ad[0] }, bd[i])
                        })
                        .collect(),
                    Broadcast::ScalarRhs => {
                        let mut acc = T::ZERO;
                        for (i, &gi) in g.iter().enumerate() {
                            acc += gi * dfb(ad[i], bd[0]);
                        }
                        vec![acc]
                    }
                });
                vec![da, db]
            },
        )
    }

    pub fn add(&self, other: &Tensor<T>) -> TensorResult<Tensor<T>> {
        self.binary("add", other, |a, b| a + b, |_, _| T::ONE, |_, _| T::ONE)
    }

    pub fn sub(&self, other: &Tensor<T>) -> TensorResult<Tensor<T>> {
        self.binary("sub", other, |a, b| a - b, |_, _| T::ONE, |_, _| -T::ONE)
    }

    pub fn mul(&self, other: &Tensor<T>) -> TensorResult<Tensor<T>> {
        self.binary("mul", other, |a, b| a * b, |_, b| b, |a, _| a)
    }

    /// Multiply by a compile-time constant; the constant takes no gradient.
    pub fn scale(&self, c: f64) -> Tensor<T> {
        let cv: T = cast(c);
        self.unary(move |x| x * cv, move |_, _| cv)
    }

    pub fn neg(&self) -> Tensor<T> {
        self.scale(-1.0)
    }

    pub fn silu(&self) -> Tensor<T> {
        self.unary(
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (T::ONE + x * (T::ONE - s))
            },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor<T> {
        let k: T = cast((2.0 / std::f64::consts::PI).sqrt());
        let a: T = cast(0.044715);
        let half: T = cast(0.5);
        let three: T = cast(3.0);
        self.unary(
            move |x| {
                let u = k * (x + a * x * x * x);
                half * x * (T::ONE + u.tanh())
            },
            move |x, _| {
                let u = k * (x + a * x * x * x);
                let t = u.tanh();
                half * (T::ONE + t) + half * x * (T::ONE - t * t) * k * (T::ONE + three * a * x * x)
            },
        )
    }

    pub fn sqrt(&self) -> Tensor<T> {
        let half: T = cast(0.5);
        self.unary(|x| x.sqrt(), move |_, y| half / y)
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn abs(&self) -> Tensor<T> {
        self.unary(
            |x| x.abs(),
            |x, _| {
                if x > T::ZERO {
                    T::ONE
                } else if x < T::ZERO {
                    -T::ONE
                } else {
                    T::ZERO
                }
            },
        )
    }

    /// Clamp to `[lo, hi]`; gradient passes through inside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor<T> {
        let lo_t: T = cast(lo);
        let hi_t: T = cast(hi);
        self.unary(
            move |x| x.maximum(lo_t).minimum(hi_t),
            move |x, _| {
                if x >= lo_t && x <= hi_t {
                    T::ONE
                } else {
                    T::ZERO
                }
            },
        )
    }

    pub fn square(&self) -> TensorResult<Tensor<T>> {
        self.mul(self)
    }

    pub fn sum_all(&self) -> Tensor<T> {
        let mut acc = T::ZERO;
        for &v in self.data().iter() {
            acc += v;
        }
        let n = self.numel();
        Tensor::from_op(vec![acc], vec![1], vec![self.clone()], move |g, needs| {
            if !needs[0] {
                return vec![None];
            }
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = self.numel();
        self.sum_all().scale(1.0 / n as f64)
    }

    pub fn reshape(&self, new_shape: &[usize]) -> TensorResult<Tensor<T>> {
        let numel: usize = new_shape.iter().product();
        if numel != self.numel() {
            return Err(invalid(
                "reshape",
                format!("cannot reshape {:?} into {:?}", self.dims(), new_shape),
            ));
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            new_shape.to_vec(),
            vec![self.clone()],
            move |g, needs| {
                if !needs[0] {
                    return vec![None];
                }
                vec![Some(g.to_vec())]
            },
        ))
    }

    /// General axis permutation (copying transpose).
    pub fn permute(&self, perm: &[usize]) -> TensorResult<Tensor<T>> {
        let nd = self.ndim();
        if perm.len() != nd || {
            let mut seen = vec![false; nd];
            perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true))
        } {
            return Err(invalid("permute", format!("invalid permutation {:?}", perm)));
        }
        let src_shape = self.shape();
        let dst_shape: Vec<usize> = perm.iter().map(|&p| src_shape[p]).collect();
        let fwd = permute_index_map(&src_shape, perm);
        let out: Vec<T> = {
            let d = self.data();
            fwd.iter().map(|&i| d[i]).collect()
        };
        let n_in = self.numel();
        Ok(Tensor::from_op(
            out,
            dst_shape,
            vec![self.clone()],
            move |g, needs| {
                if !needs[0] {
                    return vec![None];
                }
                let mut dg = vec![T::ZERO; n_in];
                for (o, &i) in fwd.iter().enumerate() {
                    dg[i] += g[o];
                }
                vec![Some(dg)]
            },
        ))
    }

    /// Contiguous sub-range along one axis.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> TensorResult<Tensor<T>> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(invalid(
                "narrow",
                format!("axis {axis} range {start}..{} out of shape {:?}", start + len, shape),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let extent = shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        {
            let d = self.data();
            for o in 0..outer {
                let base = o * extent * inner;
                out.extend_from_slice(&d[base + start * inner..base + (start + len) * inner]);
            }
        }
        let mut new_shape = shape.clone();
        new_shape[axis] = len;
        let n_in = self.numel();
        Ok(Tensor::from_op(
            out,
            new_shape,
            vec![self.clone()],
            move |g, needs| {
                if !needs[0] {
                    return vec![None];
                }
                let mut dg = vec![T::ZERO; n_in];
                for o in 0..outer {
                    let src = o * len * inner;
                    let dst = o * extent * inner + start * inner;
                    for i in 0..len * inner {
                        dg[dst + i] += g[src + i];
                    }
                }
                vec![Some(dg)]
            },
        ))
    }

    /// Pick one index along an axis and drop the axis.
    pub fn select(&self, axis: usize, index: usize) -> TensorResult<Tensor<T>> {
        let t = self.narrow(axis, index, 1)?;
        let mut shape = t.shape();
        shape.remove(axis);
        t.reshape(&shape)
    }

    /// Tile this tensor across new leading axes; gradient sums the tiles.
    /// Used to lift parameters like positional embeddings to batch shape.
    pub fn broadcast_leading(&self, leading: &[usize]) -> Tensor<T> {
        let reps: usize = leading.iter().product();
        let n = self.numel();
        let mut out = Vec::with_capacity(reps * n);
        {
            let d = self.data();
            for _ in 0..reps {
                out.extend_from_slice(&d);
            }
        }
        let mut shape = leading.to_vec();
        shape.extend_from_slice(self.dims());
        Tensor::from_op(out, shape, vec![self.clone()], move |g, needs| {
            if !needs[0] {
                return vec![None];
            }
            let mut dg = vec![T::ZERO; n];
            for r in 0..reps {
                let base = r * n;
                for i in 0..n {
                    dg[i] += g[base + i];
                }
            }
            vec![Some(dg)]
        })
    }

    /// Gather: `out[i] = self[indices[i]]`. Backward scatter-adds, so indices
    /// may repeat (e.g. nearest-neighbor upsampling).
    pub(crate) fn gather_flat(&self, indices: std::rc::Rc<Vec<usize>>, out_shape: Vec<usize>) -> Tensor<T> {
        debug_assert_eq!(out_shape.iter().product::<usize>(), indices.len());
        let out: Vec<T> = {
            let d = self.data();
            indices.iter().map(|&i| d[i]).collect()
        };
        let n_in = self.numel();
        let idx = indices;
        Tensor::from_op(out, out_shape, vec![self.clone()], move |g, needs| {
            if !needs[0] {
                return vec![None];
            }
            let mut dg = vec![T::ZERO; n_in];
            for (o, &i) in idx.iter().enumerate() {
                dg[i] += g[o];
            }
            vec![Some(dg)]
        })
    }

    /// Concatenate tensors along `axis`.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> TensorResult<Tensor<T>> {
        if parts.is_empty() {
            return Err(invalid("concat", "no tensors given"));
        }
        let first = parts[0].shape();
        if axis >= first.len() {
            return Err(invalid("concat", format!("axis {axis} out of rank {}", first.len())));
        }
        for p in parts {
            let s = p.shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(first.iter())
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s,
                });
            }
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let extents: Vec<usize> = parts.iter().map(|p| p.dims()[axis]).collect();
        let total_extent: usize = extents.iter().sum();
        let mut out = Vec::with_capacity(outer * total_extent * inner);
        for o in 0..outer {
            for (p, &e) in parts.iter().zip(&extents) {
                let d = p.data();
                out.extend_from_slice(&d[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total_extent;
        let parents: Vec<Tensor<T>> = parts.iter().map(|p| (*p).clone()).collect();
        let ext = extents;
        Tensor::from_op_checked(out, shape, parents, move |g, needs| {
            let mut grads: Vec<Option<Vec<T>>> = ext
                .iter()
                .zip(needs)
                .map(|(&e, &need)| need.then(|| Vec::with_capacity(outer * e * inner)))
                .collect();
            let mut off = 0;
            for _o in 0..outer {
                for (pi, &e) in ext.iter().enumerate() {
                    let chunk = &g[off..off + e * inner];
                    if let Some(gv) = grads[pi].as_mut() {
                        gv.extend_from_slice(chunk);
                    }
                    off += e * inner;
                }
            }
            grads
        })
    }

    /// Stack along a new leading axis.
    pub fn stack(parts: &[&Tensor<T>]) -> TensorResult<Tensor<T>> {
        if parts.is_empty() {
            return Err(invalid("stack", "no tensors given"));
        }
        let mut shape = vec![1];
        shape.extend_from_slice(parts[0].dims());
        let reshaped: Vec<Tensor<T>> = parts
            .iter()
            .map(|p| p.reshape(&shape))
            .collect::<TensorResult<_>>()?;
        let refs: Vec<&Tensor<T>> = reshaped.iter().collect();
        Tensor::concat(&refs, 0)
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Tensor<T>) -> TensorResult<Tensor<T>> {
        let (a_shape, b_shape) = (self.shape(), other.shape());
        if a_shape.len() != 2 || b_shape.len() != 2 {
            return Err(invalid(
                "matmul",
                format!("expected 2-D operands, got {:?} and {:?}", a_shape, b_shape),
            ));
        }
        let (m, k) = (a_shape[0], a_shape[1]);
        let (k2, n) = (b_shape[0], b_shape[1]);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a_shape,
                rhs: b_shape,
            });
        }
        let out = {
            let ad = self.data();
            let bd = other.data();
            mm(&ad, &bd, m, k, n)
        };
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op_checked(
            out,
            vec![m, n],
            vec![self.clone(), other.clone()],
            move |g, needs| {
                let da = needs[0].then(|| mm_nt(g, &b.data(), m, n, k));
                let db = needs[1].then(|| mm_tn(&a.data(), g, m, k, n));
                vec![da, db]
            },
        )
    }

    /// Affine map over the last axis: `y = x @ w + b`, flattening leading axes.
    pub fn linear(&self, w: &Tensor<T>, b: Option<&Tensor<T>>) -> TensorResult<Tensor<T>> {
        let x_shape = self.shape();
        let w_shape = w.shape();
        if w_shape.len() != 2 || x_shape.is_empty() {
            return Err(invalid(
                "linear",
                format!("weight must be 2-D, got {:?}", w_shape),
            ));
        }
        let k = *x_shape.last().unwrap();
        let (wk, n) = (w_shape[0], w_shape[1]);
        if k != wk {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: x_shape,
                rhs: w_shape,
            });
        }
        if let Some(bias) = b {
            if bias.dims() != [n] {
                return Err(TensorError::ShapeMismatch {
                    op: "linear",
                    lhs: vec![n],
                    rhs: bias.shape(),
                });
            }
        }
        let rows: usize = x_shape[..x_shape.len() - 1].iter().product();
        let mut out = {
            let xd = self.data();
            let wd = w.data();
            mm(&xd, &wd, rows, k, n)
        };
        if let Some(bias) = b {
            let bd = bias.data();
            for r in 0..rows {
                let row = &mut out[r * n..(r + 1) * n];
                for (o, &bv) in row.iter_mut().zip(bd.iter()) {
                    *o += bv;
                }
            }
        }
        let mut out_shape = x_shape.clone();
        *out_shape.last_mut().unwrap() = n;

        let x = self.clone();
        let wt = w.clone();
        let mut parents = vec![self.clone(), w.clone()];
        let has_bias = b.is_some();
        if let Some(bias) = b {
            parents.push(bias.clone());
        }
        Tensor::from_op_checked(out, out_shape, parents, move |g, needs| {
            let dx = needs[0].then(|| mm_nt(g, &wt.data(), rows, n, k));
            let dw = needs[1].then(|| mm_tn(&x.data(), g, rows, k, n));
            let mut grads = vec![dx, dw];
            if has_bias {
                let db = needs[2].then(|| {
                    let mut acc = vec![T::ZERO; n];
                    for r in 0..rows {
                        for (a, &gv) in acc.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                            *a += gv;
                        }
                    }
                    acc
                });
                grads.push(db);
            }
            grads
        })
    }

    /// Softmax over the last axis (numerically stable).
    pub fn softmax_last_dim(&self) -> TensorResult<Tensor<T>> {
        let shape = self.shape();
        let Some(&d) = shape.last() else {
            return Err(invalid("softmax", "zero-rank tensor"));
        };
        let rows = self.numel() / d;
        let mut out = vec![T::ZERO; self.numel()];
        {
            let xd = self.data();
            for r in 0..rows {
                softmax_row(&xd[r * d..(r + 1) * d], &mut out[r * d..(r + 1) * d]);
            }
        }
        let p_saved = out.clone();
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone()],
            move |g, needs| {
                if !needs[0] {
                    return vec![None];
                }
                let mut dg = vec![T::ZERO; p_saved.len()];
                for r in 0..rows {
                    let p = &p_saved[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mut dot = T::ZERO;
                    for (&pi, &gi) in p.iter().zip(gr) {
                        dot += pi * gi;
                    }
                    for ((o, &pi), &gi) in dg[r * d..(r + 1) * d].iter_mut().zip(p).zip(gr) {
                        *o = pi * (gi - dot);
                    }
                }
                vec![Some(dg)]
            },
        ))
    }

    /// Mean cross-entropy between logits `[B, K]` and integer labels.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> TensorResult<Tensor<T>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(invalid("cross_entropy", format!("logits must be [B,K], got {:?}", shape)));
        }
        let (bsz, k) = (shape[0], shape[1]);
        if labels.len() != bsz {
            return Err(invalid(
                "cross_entropy",
                format!("{} labels for batch of {}", labels.len(), bsz),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(invalid("cross_entropy", format!("label {bad} out of {k} classes")));
        }
        let mut probs = vec![T::ZERO; bsz * k];
        let mut loss = T::ZERO;
        {
            let xd = self.data();
            for r in 0..bsz {
                softmax_row(&xd[r * k..(r + 1) * k], &mut probs[r * k..(r + 1) * k]);
                let p = probs[r * k + labels[r]];
                loss += -(p.ln());
            }
        }
        loss = loss / cast::<T>(bsz as f64);
        let labels = labels.to_vec();
        Ok(Tensor::from_op(
            vec![loss],
            vec![1],
            vec![self.clone()],
            move |g, needs| {
                if !needs[0] {
                    return vec![None];
                }
                let scale = g[0] / cast::<T>(bsz as f64);
                let mut dg = probs.clone();
                for (r, &lbl) in labels.iter().enumerate() {
                    dg[r * k + lbl] = dg[r * k + lbl] - T::ONE;
                }
                for v in dg.iter_mut() {
                    *v = *v * scale;
                }
                vec![Some(dg)]
            },
        ))
    }

    /// Mean absolute error.
    pub fn l1_loss(&self, target: &Tensor<T>) -> TensorResult<Tensor<T>> {
        Ok(self.sub(target)?.abs().mean_all())
    }

    /// Mean squared error.
    pub fn mse_loss(&self, target: &Tensor<T>) -> TensorResult<Tensor<T>> {
        let d = self.sub(target)?;
        Ok(d.square()?.mean_all())
    }

    /// `from_op` for callers whose vjp is built before shape validation.
    pub(crate) fn from_op_checked(
        data: Vec<T>,
        shape: Vec<usize>,
        parents: Vec<Tensor<T>>,
        vjp: impl Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + 'static,
    ) -> TensorResult<Tensor<T>> {
        Ok(Tensor::from_op(data, shape, parents, vjp))
    }
}

#[inline]
fn softmax_row<T: Element>(x: &[T], out: &mut [T]) {
    let mut mx = x[0];
    for &v in x {
        mx = mx.maximum(v);
    }
    let mut sum = T::ZERO;
    for (o, &v) in out.iter_mut().zip(x) {
        let e = (v - mx).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

/// `C[m,n] = A[m,k] · B[k,n]`, rows of C computed independently.
pub(crate) fn mm<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::ZERO; m * n];
    let body = |(i, crow): (usize, &mut [T])| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        c.chunks_mut(n).enumerate().for_each(body);
    }
    c
}

/// `C[m,n] = A[m,k] · B[n,k]ᵀ` (rows dot rows).
pub(crate) fn mm_nt<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::ZERO; m * n];
    let body = |(i, crow): (usize, &mut [T])| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::ZERO;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *cv = acc;
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        c.chunks_mut(n).enumerate().for_each(body);
    }
    c
}

/// `C[k,n] = A[m,k]ᵀ · B[m,n]` (rank-1 accumulation over rows of A/B).
pub(crate) fn mm_tn<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::ZERO; k * n];
    let body = |(i, crow): (usize, &mut [T])| {
        for p in 0..m {
            let av = a[p * k + i];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && k > 1 {
        c.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        c.chunks_mut(n).enumerate().for_each(body);
    }
    c
}

/// For each output position of the permuted tensor, the source flat index.
fn permute_index_map(src_shape: &[usize], perm: &[usize]) -> std::rc::Rc<Vec<usize>> {
    let nd = src_shape.len();
    let mut src_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        src_strides[i] = src_strides[i + 1] * src_shape[i + 1];
    }
    let dst_shape: Vec<usize> = perm.iter().map(|&p| src_shape[p]).collect();
    let numel: usize = src_shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; nd];
    for _ in 0..numel {
        let mut src = 0;
        for (d, &i) in idx.iter().enumerate() {
            src += i * src_strides[perm[d]];
        }
        map.push(src);
        // odometer increment over dst_shape
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < dst_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    std::rc::Rc::new(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_unary_op;

    #[test]
    fn add_elementwise() {
        let a = Tensor::<f64>::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        let b = Tensor::<f64>::from_vec(vec![3.0, 4.0], &[2]).unwrap();
        assert_eq!(a.add(&b).unwrap().to_vec(), vec![4.0, 6.0]);
    }

    #[test]
    fn scale_elementwise() {
        let a = Tensor::<f64>::from_vec(vec![2.0, -2.0], &[2]).unwrap();
        assert_eq!(a.scale(0.5).to_vec(), vec![1.0, -1.0]);
    }

    #[test]
    fn shape_mismatch_is_descriptive() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[3, 2]);
        let err = a.add(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn scalar_broadcast_both_sides() {
        let a = Tensor::<f64>::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        let s = Tensor::<f64>::scalar(10.0);
        assert_eq!(a.add(&s).unwrap().to_vec(), vec![11.0, 12.0]);
        assert_eq!(s.sub(&a).unwrap().to_vec(), vec![9.0, 8.0]);
        // gradient w.r.t. the scalar side sums over elements
        let s = Tensor::<f64>::param(vec![10.0], &[1]).unwrap();
        let loss = a.mul(&s).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(s.grad().unwrap(), vec![3.0]);
    }

    #[test]
    fn silu_at_zero_value_and_gradient() {
        let x = Tensor::<f64>::param(vec![0.0], &[1]).unwrap();
        let y = x.silu();
        assert_eq!(y.item(), 0.0);
        y.sum_all().backward().unwrap();
        assert!((x.grad().unwrap()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn matmul_identity_and_inner() {
        let eye = Tensor::<f64>::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let m = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        assert_eq!(eye.matmul(&m).unwrap().to_vec(), vec![1.0, 2.0, 3.0, 4.0]);

        let a = Tensor::<f64>::from_vec(vec![1.0, 2.0], &[1, 2]).unwrap();
        let b = Tensor::<f64>::from_vec(vec![3.0, 4.0], &[2, 1]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().to_vec(), vec![11.0]);

        let bad = Tensor::<f64>::zeros(&[3, 3]);
        assert!(a.matmul(&bad).is_err());
    }

    #[test]
    fn unary_op_gradients_match_finite_differences() {
        check_unary_op("silu", |x| Ok(x.silu()));
        check_unary_op("gelu", |x| Ok(x.gelu()));
        check_unary_op("exp", |x| Ok(x.exp()));
        check_unary_op("abs", |x| Ok(x.abs()));
        check_unary_op("scale", |x| Ok(x.scale(-1.7)));
    }

    #[test]
    fn concat_and_narrow_roundtrip() {
        let a = Tensor::<f64>::from_vec((0..6).map(f64::from).collect(), &[2, 3]).unwrap();
        let b = Tensor::<f64>::from_vec((6..10).map(f64::from).collect(), &[2, 2]).unwrap();
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.dims(), &[2, 5]);
        assert_eq!(c.to_vec(), vec![0., 1., 2., 6., 7., 3., 4., 5., 8., 9.]);
        let back = c.narrow(1, 0, 3).unwrap();
        assert_eq!(back.to_vec(), a.to_vec());
    }

    #[test]
    fn permute_roundtrip() {
        let a = Tensor::<f64>::from_vec((0..24).map(f64::from).collect(), &[2, 3, 4]).unwrap();
        let p = a.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.dims(), &[4, 2, 3]);
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back.to_vec(), a.to_vec());
    }

    #[test]
    fn broadcast_leading_grad_sums() {
        let p = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        let t = p.broadcast_leading(&[3]);
        assert_eq!(t.dims(), &[3, 2]);
        t.sum_all().backward().unwrap();
        assert_eq!(p.grad().unwrap(), vec![3.0, 3.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::<f64>::from_vec(vec![0.3, -1.2, 5.0, 2.0, 2.0, 2.0], &[2, 3]).unwrap();
        let p = x.softmax_last_dim().unwrap();
        let d = p.to_vec();
        for r in 0..2 {
            let s: f64 = d[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_matches_hand_value() {
        // logits [0,0] -> p = 0.5 -> loss = ln 2
        let x = Tensor::<f64>::param(vec![0.0, 0.0], &[1, 2]).unwrap();
        let loss = x.softmax_cross_entropy(&[1]).unwrap();
        assert!((loss.item() - std::f64::consts::LN_2).abs() < 1e-12);
        loss.backward().unwrap();
        let g = x.grad().unwrap();
        assert!((g[0] - 0.5).abs() < 1e-12 && (g[1] + 0.5).abs() < 1e-12);
    }
}
