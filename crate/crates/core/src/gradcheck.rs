//! Central finite-difference gradient checking.
//!
//! This is the independent oracle for every backward rule in the crate: it
//! re-evaluates the forward pass under perturbation and never touches the
//! autodiff path. Checks are only meaningful in `f64`; 32-bit rounding noise
//! swamps the difference quotient.

use rand::seq::index::sample;

use crate::rng;
use crate::tensor::{no_grad, Tensor, TensorResult};

pub struct GradCheck {
    /// Central-difference step.
    pub step: f64,
    /// Relative tolerance on |fd - ad|.
    pub rtol: f64,
    /// Absolute tolerance floor.
    pub atol: f64,
    /// Max coordinates checked per input tensor (sampled when exceeded).
    pub max_coords: usize,
    /// Seed for coordinate sampling.
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            rtol: 1e-4,
            atol: 1e-7,
            max_coords: usize::MAX,
            seed: 0,
        }
    }
}

#[derive(Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_diff: f64,
    /// (input index, coordinate, autodiff grad, finite-difference grad)
    pub failures: Vec<(usize, usize, f64, f64)>,
}

impl GradReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }
}

impl GradCheck {
    /// Check d(loss)/d(input) for every listed input of a scalar-valued
    /// forward pass. The closure must rebuild the graph from the same tensor
    /// handles on every call.
    pub fn run(
        &self,
        inputs: &[Tensor<f64>],
        forward: &dyn Fn() -> TensorResult<Tensor<f64>>,
    ) -> TensorResult<GradReport> {
        for t in inputs {
            t.set_requires_grad(true);
            t.zero_grad();
        }
        let loss = forward()?;
        loss.backward()?;
        let grads: Vec<Vec<f64>> = inputs
            .iter()
            .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();

        let mut report = GradReport::default();
        for (ti, t) in inputs.iter().enumerate() {
            let n = t.numel();
            let coords: Vec<usize> = if n <= self.max_coords {
                (0..n).collect()
            } else {
                let mut r = rng::seeded(self.seed, &format!("gradcheck.{ti}"));
                sample(&mut r, n, self.max_coords).into_vec()
            };
            for ci in coords {
                let orig = t.data()[ci];
                t.data_mut()[ci] = orig + self.step;
                let lp = no_grad(forward)?.item();
                t.data_mut()[ci] = orig - self.step;
                let lm = no_grad(forward)?.item();
                t.data_mut()[ci] = orig;

                let fd = (lp - lm) / (2.0 * self.step);
                let ad = grads[ti][ci];
                let diff = (fd - ad).abs();
                let denom = fd.abs().max(ad.abs());
                report.checked += 1;
                report.max_abs_diff = report.max_abs_diff.max(diff);
                if denom > 1e-6 {
                    report.max_rel_err = report.max_rel_err.max(diff / denom);
                }
                if diff > self.atol + self.rtol * denom {
                    report.failures.push((ti, ci, ad, fd));
                }
            }
        }
        Ok(report)
    }
}

/// Assert an elementwise op's gradient against finite differences on a few
/// random shapes. Panics on failure; intended for `#[test]` bodies.
pub fn check_unary_op(name: &str, op: impl Fn(&Tensor<f64>) -> TensorResult<Tensor<f64>>) {
    let shapes: [&[usize]; 3] = [&[7], &[3, 5], &[2, 3, 4]];
    for (si, shape) in shapes.iter().enumerate() {
        let mut r = rng::seeded(1000 + si as u64, name);
        let x = Tensor::<f64>::randn(shape, &mut r);
        let w = Tensor::<f64>::randn(shape, &mut r);
        let check = GradCheck::default();
        let report = check
            .run(std::slice::from_ref(&x), &|| {
                Ok(op(&x)?.mul(&w)?.sum_all())
            })
            .unwrap();
        assert!(
            report.ok(),
            "{name} gradcheck failed on shape {shape:?}: {:?}",
            report.failures
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // y = x with a deliberately wrong vjp (2x instead of 1)
        let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        let xc = x.clone();
        let forward = move || {
            let broken = Tensor::from_op(
                xc.to_vec(),
                xc.shape(),
                vec![xc.clone()],
                |g, _| vec![Some(g.iter().map(|v| v * 2.0).collect())],
            );
            Ok(broken.sum_all())
        };
        let report = GradCheck::default().run(&[x], &forward).unwrap();
        assert!(!report.ok());
    }

    #[test]
    fn passes_on_a_correct_composite() {
        let mut r = crate::rng::from_seed(5);
        let x = Tensor::<f64>::randn(&[4, 3], &mut r);
        let w = Tensor::<f64>::randn(&[3, 2], &mut r);
        let report = GradCheck::default()
            .run(&[x.clone(), w.clone()], &|| {
                Ok(x.matmul(&w)?.silu().sum_all())
            })
            .unwrap();
        assert!(report.ok(), "{:?}", report.failures);
        assert!(report.max_rel_err < 1e-4);
    }
}
