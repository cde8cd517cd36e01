//! Noise schedules and step plans for the diffusion process.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How beta progresses from `beta_min` to `beta_max` over training steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

/// The per-step noise levels `beta_t` and the cumulative signal products.
///
/// `alpha_bar` has length `T+1` with `alpha_bar[0] = 1` (the clean-image
/// boundary) and `alpha_bar[t] = prod_{s=1..t}(1 - beta_s)`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Number of diffusion steps `T`.
    pub fn t_count(&self) -> usize {
        self.betas.len()
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.t_count(), "beta index {t} out of range");
        self.betas[t - 1]
    }

    /// `alpha_bar_t` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub(crate) fn check_t(&self, op: &'static str, t: usize) -> Result<()> {
        if t > self.t_count() {
            return Err(Error::Schedule(format!(
                "{op}: step {t} out of range 0..={}",
                self.t_count()
            )));
        }
        Ok(())
    }
}

/// Build a schedule of `t_count` steps with betas interpolated linearly
/// between `beta_min` and `beta_max`.
pub fn make_schedule(
    t_count: usize,
    beta_min: f64,
    beta_max: f64,
    kind: ScheduleKind,
) -> Result<NoiseSchedule> {
    if t_count == 0 {
        return Err(Error::Schedule("t_count must be at least 1".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::Schedule(format!(
            "betas must satisfy 0 < beta_min <= beta_max < 1, got {beta_min}..{beta_max}"
        )));
    }
    let ScheduleKind::Linear = kind;
    let betas: Vec<f64> = if t_count == 1 {
        vec![beta_min]
    } else {
        (0..t_count)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (t_count - 1) as f64)
            .collect()
    };
    let mut alpha_bar = Vec::with_capacity(t_count + 1);
    alpha_bar.push(1.0);
    for (i, &b) in betas.iter().enumerate() {
        alpha_bar.push(alpha_bar[i] * (1.0 - b));
    }
    Ok(NoiseSchedule { betas, alpha_bar })
}

/// Construct a schedule from explicit betas (tests, custom schedules).
pub fn schedule_from_betas(betas: Vec<f64>) -> Result<NoiseSchedule> {
    if betas.is_empty() {
        return Err(Error::Schedule("empty beta sequence".into()));
    }
    if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
        return Err(Error::Schedule("betas must lie in (0, 1)".into()));
    }
    let mut alpha_bar = Vec::with_capacity(betas.len() + 1);
    alpha_bar.push(1.0);
    for (i, &b) in betas.iter().enumerate() {
        alpha_bar.push(alpha_bar[i] * (1.0 - b));
    }
    Ok(NoiseSchedule { betas, alpha_bar })
}

/// Traversal direction of a step plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Reverse process: T down to 0 (sampling).
    Generate,
    /// Forward recurrence: 0 up to T (deterministic encoding).
    Encode,
}

/// Strictly increasing subsequence of `{1..T}` visited by an accelerated
/// DDIM traversal.
#[derive(Debug, Clone)]
pub struct StepPlan {
    steps: Vec<usize>,
    direction: Direction,
}

impl StepPlan {
    pub fn from_steps(steps: Vec<usize>, t_count: usize, direction: Direction) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::Schedule("step plan must be nonempty".into()));
        }
        if steps[0] < 1 || *steps.last().unwrap() > t_count {
            return Err(Error::Schedule(format!(
                "step plan must lie in 1..={t_count}, got {:?}",
                steps
            )));
        }
        if steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Schedule("step plan must be strictly increasing".into()));
        }
        Ok(StepPlan { steps, direction })
    }

    /// Evenly strided plan of about `n` steps spanning `1..=t_count`.
    pub fn strided(t_count: usize, n: usize, direction: Direction) -> Result<Self> {
        if n == 0 {
            return Err(Error::Schedule("step plan must have at least one step".into()));
        }
        let n = n.min(t_count);
        let mut steps: Vec<usize> = if n == 1 {
            vec![t_count]
        } else {
            (0..n)
                .map(|i| {
                    let f = 1.0 + (t_count - 1) as f64 * i as f64 / (n - 1) as f64;
                    f.round() as usize
                })
                .collect()
        };
        steps.dedup();
        Self::from_steps(steps, t_count, direction)
    }

    /// Every step `1..=T`.
    pub fn full(t_count: usize, direction: Direction) -> Result<Self> {
        Self::from_steps((1..=t_count).collect(), t_count, direction)
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn with_direction(&self, direction: Direction) -> Self {
        StepPlan {
            steps: self.steps.clone(),
            direction,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_step_half_betas() {
        let s = schedule_from_betas(vec![0.5, 0.5]).unwrap();
        assert_eq!(s.alpha_bars(), &[1.0, 0.5, 0.25]);
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.3, 0.3, ScheduleKind::Linear).unwrap();
        assert_eq!(s.alpha_bars(), &[1.0, 0.7]);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(make_schedule(0, 0.1, 0.2, ScheduleKind::Linear).is_err());
        assert!(make_schedule(10, 0.0, 0.2, ScheduleKind::Linear).is_err());
        assert!(make_schedule(10, 0.3, 0.2, ScheduleKind::Linear).is_err());
        assert!(make_schedule(10, 0.3, 1.0, ScheduleKind::Linear).is_err());
    }

    #[test]
    fn thousand_step_schedule_matches_sequential_product_oracle() {
        let s = make_schedule(1000, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        // independent sequential product over the same betas
        let mut prod = 1.0f64;
        for i in 0..1000 {
            let beta = 1e-4 + (0.02 - 1e-4) * i as f64 / 999.0;
            prod *= 1.0 - beta;
        }
        let got = s.alpha_bar(1000);
        assert!(
            ((got - prod) / prod).abs() < 1e-12,
            "got {got:e}, oracle {prod:e}"
        );
    }

    #[test]
    fn strided_plan_endpoints_and_monotonicity() {
        let p = StepPlan::strided(1000, 50, Direction::Generate).unwrap();
        assert_eq!(p.steps()[0], 1);
        assert_eq!(*p.steps().last().unwrap(), 1000);
        assert!(p.steps().windows(2).all(|w| w[0] < w[1]));

        let single = StepPlan::strided(10, 1, Direction::Generate).unwrap();
        assert_eq!(single.steps(), &[10]);
    }

    #[test]
    fn plan_validation() {
        assert!(StepPlan::from_steps(vec![], 10, Direction::Generate).is_err());
        assert!(StepPlan::from_steps(vec![0, 5], 10, Direction::Generate).is_err());
        assert!(StepPlan::from_steps(vec![2, 2], 10, Direction::Generate).is_err());
        assert!(StepPlan::from_steps(vec![5, 11], 10, Direction::Generate).is_err());
    }

    proptest! {
        #[test]
        fn alpha_bar_is_strictly_decreasing_with_exact_products(
            t in 1usize..200,
            bmin in 1e-5f64..0.1,
            spread in 0.0f64..0.5,
        ) {
            let bmax = (bmin + spread).min(0.999);
            let s = make_schedule(t, bmin, bmax, ScheduleKind::Linear).unwrap();
            let ab = s.alpha_bars();
            prop_assert_eq!(ab[0], 1.0);
            for i in 1..=t {
                prop_assert!(ab[i] < ab[i - 1]);
                // product identity holds exactly in f64 arithmetic
                prop_assert_eq!(ab[i], ab[i - 1] * (1.0 - s.beta(i)));
            }
        }
    }
}
