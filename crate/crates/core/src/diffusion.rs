//! The Gaussian forward process and the deterministic DDIM reverse recurrence.
//!
//! Everything here is shape-generic: the same recurrences drive image tensors
//! `[B,C,H,W]` and semantic-code vectors `[B,d]`. The reverse process is fully
//! deterministic (zero-variance inference distribution), which is what makes
//! exact image-to-noise encoding possible.

use crate::error::{Error, Result};
use crate::schedule::{Direction, NoiseSchedule, StepPlan};
use crate::tensor::{Element, Tensor};

/// A noise-prediction network `eps(x_t, t, cond)`.
///
/// `t` carries one step index per batch element (or a single shared index).
pub trait NoisePredictor<T: Element> {
    fn predict_noise(
        &self,
        x: &Tensor<T>,
        t: &[usize],
        cond: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>>;
}

impl<T: Element, F> NoisePredictor<T> for F
where
    F: Fn(&Tensor<T>, &[usize], Option<&Tensor<T>>) -> Result<Tensor<T>>,
{
    fn predict_noise(
        &self,
        x: &Tensor<T>,
        t: &[usize],
        cond: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        self(x, t, cond)
    }
}

fn check_same_shape<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Schedule(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Sample of the closed-form marginal: `x_t = sqrt(ab_t)·x0 + sqrt(1-ab_t)·eps`.
pub fn forward_marginal<T: Element>(
    x0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    s: &NoiseSchedule,
) -> Result<Tensor<T>> {
    s.check_t("forward_marginal", t)?;
    check_same_shape("forward_marginal", x0, eps)?;
    let ab = s.alpha_bar(t);
    Ok(x0.scale(ab.sqrt()).add(&eps.scale((1.0 - ab).sqrt()))?)
}

/// `forward_marginal` with an independent step per batch element
/// (training-time noising; `x0` is `[B, ...]`).
pub fn forward_marginal_batch<T: Element>(
    x0: &Tensor<T>,
    ts: &[usize],
    eps: &Tensor<T>,
    s: &NoiseSchedule,
) -> Result<Tensor<T>> {
    check_same_shape("forward_marginal", x0, eps)?;
    let shape = x0.shape();
    let Some(&bsz) = shape.first() else {
        return Err(Error::Schedule("forward_marginal: zero-rank input".into()));
    };
    if ts.len() != bsz {
        return Err(Error::Schedule(format!(
            "forward_marginal: {} steps for batch of {bsz}",
            ts.len()
        )));
    }
    for &t in ts {
        s.check_t("forward_marginal", t)?;
    }
    let per = x0.numel() / bsz;
    let signal = Tensor::<T>::from_fn(&shape, |i| T::from_f64(s.alpha_bar(ts[i / per]).sqrt()));
    let noise_amt =
        Tensor::<T>::from_fn(&shape, |i| T::from_f64((1.0 - s.alpha_bar(ts[i / per])).sqrt()));
    Ok(x0.mul(&signal)?.add(&eps.mul(&noise_amt)?)?)
}

/// Invert the marginal with a predicted noise:
/// `x0_hat = (x_t - sqrt(1-ab_t)·eps_hat) / sqrt(ab_t)`.
pub fn predict_x0<T: Element>(
    x_t: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t: usize,
    s: &NoiseSchedule,
) -> Result<Tensor<T>> {
    s.check_t("predict_x0", t)?;
    check_same_shape("predict_x0", x_t, eps_hat)?;
    let ab = s.alpha_bar(t);
    Ok(x_t
        .sub(&eps_hat.scale((1.0 - ab).sqrt()))?
        .scale(1.0 / ab.sqrt()))
}

/// One deterministic DDIM reverse step from `t` to `t_prev < t`:
/// `x_{t_prev} = sqrt(ab_prev)·x0_hat + sqrt(1-ab_prev)·eps_hat`.
///
/// With `clip_x0`, the intermediate prediction is clamped to `[-1, 1]`
/// before recombination (image sampling); the noise direction is kept as-is.
pub fn ddim_step<T: Element>(
    x_t: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t: usize,
    t_prev: usize,
    s: &NoiseSchedule,
    clip_x0: bool,
) -> Result<Tensor<T>> {
    if t_prev >= t {
        return Err(Error::Schedule(format!(
            "ddim_step: t_prev {t_prev} must be below t {t}"
        )));
    }
    s.check_t("ddim_step", t)?;
    let mut x0_hat = predict_x0(x_t, eps_hat, t, s)?;
    if clip_x0 {
        x0_hat = x0_hat.clamp(-1.0, 1.0);
    }
    let ab_prev = s.alpha_bar(t_prev);
    Ok(x0_hat
        .scale(ab_prev.sqrt())
        .add(&eps_hat.scale((1.0 - ab_prev).sqrt()))?)
}

/// Run the reverse recurrence from `x_T` down to the clean estimate.
///
/// The plan is traversed descending, ending with a final step onto the
/// `alpha_bar = 1` boundary (which returns the model's clean prediction).
/// Purely functional in `(x_start, cond, parameters, plan)`.
pub fn ddim_sample<T: Element>(
    x_start: &Tensor<T>,
    predictor: &dyn NoisePredictor<T>,
    cond: Option<&Tensor<T>>,
    plan: &StepPlan,
    s: &NoiseSchedule,
    clip_x0: bool,
) -> Result<Tensor<T>> {
    if plan.direction() != Direction::Generate {
        return Err(Error::Schedule(
            "ddim_sample requires a Generate-direction plan".into(),
        ));
    }
    s.check_t("ddim_sample", *plan.steps().last().unwrap())?;
    let mut x = x_start.clone();
    let steps = plan.steps();
    for i in (0..steps.len()).rev() {
        let t = steps[i];
        let t_prev = if i > 0 { steps[i - 1] } else { 0 };
        let eps_hat = predictor.predict_noise(&x, &[t], cond)?;
        check_same_shape("ddim_sample", &x, &eps_hat)?;
        x = ddim_step(&x, &eps_hat, t, t_prev, s, clip_x0)?;
    }
    Ok(x)
}

/// Deterministically encode an image to its noise map by running the DDIM
/// recurrence in ascending `t`. For a well-fit predictor,
/// `ddim_sample(ddim_encode(x0)) ≈ x0`.
pub fn ddim_encode<T: Element>(
    x0: &Tensor<T>,
    predictor: &dyn NoisePredictor<T>,
    cond: Option<&Tensor<T>>,
    plan: &StepPlan,
    s: &NoiseSchedule,
) -> Result<Tensor<T>> {
    if plan.direction() != Direction::Encode {
        return Err(Error::Schedule(
            "ddim_encode requires an Encode-direction plan".into(),
        ));
    }
    s.check_t("ddim_encode", *plan.steps().last().unwrap())?;
    let mut x = x0.clone();
    let mut t_cur = 0usize;
    for &t_next in plan.steps() {
        // evaluate the predictor at the current point; t = 0 is outside the
        // trained range, so the first evaluation uses t = 1
        let t_eval = t_cur.max(1);
        let eps_hat = predictor.predict_noise(&x, &[t_eval], cond)?;
        check_same_shape("ddim_encode", &x, &eps_hat)?;
        let x0_hat = predict_x0(&x, &eps_hat, t_cur, s)?;
        let ab_next = s.alpha_bar(t_next);
        x = x0_hat
            .scale(ab_next.sqrt())
            .add(&eps_hat.scale((1.0 - ab_next).sqrt()))?;
        t_cur = t_next;
    }
    Ok(x)
}
