//! Small neural-net building blocks shared by the encoder, UNet, latent
//! denoiser, and classifier: parameterized layers, Adam, and the sinusoidal
//! step embedding.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{cast, group_norm, layer_norm, Element, Tensor};

/// Named parameter list; the order defines the checkpoint layout.
pub type NamedParams<T> = Vec<(String, Tensor<T>)>;

pub(crate) fn push_params<T: Element>(
    out: &mut NamedParams<T>,
    prefix: &str,
    items: NamedParams<T>,
) {
    for (name, t) in items {
        out.push((format!("{prefix}.{name}"), t));
    }
}

/// Fully-connected layer `y = x·w + b`.
pub struct Linear<T: Element> {
    pub w: Tensor<T>,
    pub b: Option<Tensor<T>>,
}

impl<T: Element> Linear<T> {
    /// Normal init scaled by 1/sqrt(fan_in).
    pub fn new(d_in: usize, d_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let w = Tensor::randn_std(&[d_in, d_out], 1.0 / (d_in as f64).sqrt(), rng);
        w.set_requires_grad(true);
        let b = bias.then(|| {
            let b = Tensor::zeros(&[d_out]);
            b.set_requires_grad(true);
            b
        });
        Linear { w, b }
    }

    /// All-zero weights and a constant bias (condition heads, output layers).
    pub fn zeros_with_bias(d_in: usize, d_out: usize, bias_value: f64) -> Self {
        let w = Tensor::zeros(&[d_in, d_out]);
        w.set_requires_grad(true);
        let b = Tensor::full(&[d_out], bias_value);
        b.set_requires_grad(true);
        Linear { w, b: Some(b) }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.linear(&self.w, self.b.as_ref())?)
    }

    pub fn params(&self) -> NamedParams<T> {
        let mut p = vec![("w".to_string(), self.w.clone())];
        if let Some(b) = &self.b {
            p.push(("b".to_string(), b.clone()));
        }
        p
    }
}

/// Layer normalization with learned affine.
pub struct LayerNorm<T: Element> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
    pub eps: f64,
}

impl<T: Element> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        let gain = Tensor::ones(&[dim]);
        let bias = Tensor::zeros(&[dim]);
        gain.set_requires_grad(true);
        bias.set_requires_grad(true);
        LayerNorm {
            gain,
            bias,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(layer_norm(x, &self.gain, &self.bias, self.eps)?)
    }

    pub fn params(&self) -> NamedParams<T> {
        vec![
            ("gain".to_string(), self.gain.clone()),
            ("bias".to_string(), self.bias.clone()),
        ]
    }
}

/// Group normalization with learned affine.
pub struct GroupNorm<T: Element> {
    pub groups: usize,
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
    pub eps: f64,
}

impl<T: Element> GroupNorm<T> {
    pub fn new(groups: usize, channels: usize) -> Self {
        let gain = Tensor::ones(&[channels]);
        let bias = Tensor::zeros(&[channels]);
        gain.set_requires_grad(true);
        bias.set_requires_grad(true);
        GroupNorm {
            groups,
            gain,
            bias,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(group_norm(x, self.groups, &self.gain, &self.bias, self.eps)?)
    }

    pub fn params(&self) -> NamedParams<T> {
        vec![
            ("gain".to_string(), self.gain.clone()),
            ("bias".to_string(), self.bias.clone()),
        ]
    }
}

/// 3x3 or 1x1 convolution layer.
pub struct Conv2d<T: Element> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Element> Conv2d<T> {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let w = Tensor::randn_std(&[out_ch, in_ch, kernel, kernel], 1.0 / fan_in.sqrt(), rng);
        let b = Tensor::zeros(&[out_ch]);
        w.set_requires_grad(true);
        b.set_requires_grad(true);
        Conv2d { w, b, stride, pad }
    }

    /// Zero-initialized variant (final output projections).
    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        let w = Tensor::zeros(&[out_ch, in_ch, kernel, kernel]);
        let b = Tensor::zeros(&[out_ch]);
        w.set_requires_grad(true);
        b.set_requires_grad(true);
        Conv2d { w, b, stride, pad }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.conv2d(&self.w, Some(&self.b), self.stride, self.pad)?)
    }

    pub fn params(&self) -> NamedParams<T> {
        vec![
            ("w".to_string(), self.w.clone()),
            ("b".to_string(), self.b.clone()),
        ]
    }
}

/// Sinusoidal embedding of integer steps, 10000-base frequencies, one row per
/// batch element. Constant w.r.t. the graph (no gradient into `t`).
pub fn sinusoidal_embedding<T: Element>(ts: &[usize], dim: usize) -> Tensor<T> {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even");
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let tf = t as f64;
        for i in 0..half {
            let freq = (-(10000.0f64.ln()) * i as f64 / (half - 1).max(1) as f64).exp();
            data.push(cast::<T>((tf * freq).sin()));
        }
        for i in 0..half {
            let freq = (-(10000.0f64.ln()) * i as f64 / (half - 1).max(1) as f64).exp();
            data.push(cast::<T>((tf * freq).cos()));
        }
    }
    Tensor::from_vec(data, &[ts.len(), dim]).expect("length matches shape")
}

/// Adam optimizer over a fixed parameter list.
pub struct Adam<T: Element> {
    params: Vec<Tensor<T>>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Element> Adam<T> {
    pub fn new(params: Vec<Tensor<T>>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Adam {
            params,
            m,
            v,
            step_count: 0,
            lr,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }

    /// Apply one update from accumulated gradients, then clear them.
    pub fn step(&mut self) {
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for (pi, p) in self.params.iter().enumerate() {
            let Some(grad) = p.grad() else { continue };
            let mut data = p.data_mut();
            for (i, g) in grad.iter().enumerate() {
                let g = g.to_f64();
                let m = &mut self.m[pi][i];
                let v = &mut self.v[pi][i];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                let upd = self.lr * mhat / (vhat.sqrt() + self.eps);
                data[i] = cast(data[i].to_f64() - upd);
            }
        }
        drop(self.params.iter().map(|p| p.zero_grad()).collect::<Vec<_>>());
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::from_seed;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let x = Tensor::<f64>::param(vec![3.0, -2.0], &[2]).unwrap();
        let mut opt = Adam::new(vec![x.clone()], 0.1, 0.9, 0.999);
        for _ in 0..300 {
            let loss = x.square().unwrap().sum_all();
            loss.backward().unwrap();
            opt.step();
        }
        assert!(x.to_vec().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn sinusoidal_embeddings_distinguish_steps() {
        let e = sinusoidal_embedding::<f64>(&(1..=100).collect::<Vec<_>>(), 16);
        let d = e.to_vec();
        for a in 0..100 {
            for b in a + 1..100 {
                let ra = &d[a * 16..(a + 1) * 16];
                let rb = &d[b * 16..(b + 1) * 16];
                let dist: f64 = ra.iter().zip(rb).map(|(x, y)| (x - y).powi(2)).sum();
                assert!(dist > 1e-12, "steps {} and {} collide", a + 1, b + 1);
            }
        }
    }

    #[test]
    fn linear_gradcheck() {
        let mut rng = from_seed(9);
        let layer = Linear::<f64>::new(3, 4, true, &mut rng);
        let x = Tensor::<f64>::randn(&[2, 3], &mut rng);
        let inputs = vec![x.clone(), layer.w.clone(), layer.b.clone().unwrap()];
        let report = crate::gradcheck::GradCheck::default()
            .run(&inputs, &|| Ok(layer.forward(&x)?.silu().sum_all()))
            .unwrap();
        assert!(report.ok(), "{:?}", report.failures);
    }
}
