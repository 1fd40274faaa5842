//! Adaptation-factor and learning-rate schedules over training progress.

use crate::math;

/// Schedule constants for one training stage. `progress = step / max_iters`
/// runs linearly from 0 to 1.
#[derive(Clone, Debug)]
pub struct ScheduleParams {
    /// Steepness of the adaptation-factor ramp.
    pub gamma_adapt: f64,
    /// Initial learning rate.
    pub eta0: f64,
    /// Learning-rate decay scale.
    pub alpha_lr: f64,
    /// Learning-rate decay exponent.
    pub beta_lr: f64,
    /// Optimizer steps in the stage.
    pub max_iters: usize,
}

impl ScheduleParams {
    pub fn new(eta0: f64, max_iters: usize) -> Self {
        ScheduleParams {
            gamma_adapt: 10.0,
            eta0,
            alpha_lr: 10.0,
            beta_lr: 0.75,
            max_iters,
        }
    }
}

/// Adaptation factor `lambda = 2 / (1 + exp(-gamma * p)) - 1`, increasing
/// from 0 at `p = 0` towards 1. Progress outside `[0, 1]` is clamped with a
/// warning.
pub fn lambda_schedule(p: f64, gamma_adapt: f64) -> f64 {
    let p = clamp_progress(p, "lambda_schedule");
    2.0 / (1.0 + math::exp(-gamma_adapt * p)) - 1.0
}

/// Learning rate `eta_p = eta0 / (1 + alpha * p)^beta`, decreasing from
/// `eta0` at `p = 0`.
pub fn lr_schedule(p: f64, sched: &ScheduleParams) -> f64 {
    let p = clamp_progress(p, "lr_schedule");
    sched.eta0 / math::powf(1.0 + sched.alpha_lr * p, sched.beta_lr)
}

fn clamp_progress(p: f64, context: &str) -> f64 {
    if !(0.0..=1.0).contains(&p) {
        log::warn!("{context}: progress {p} outside [0, 1], clamping");
        return p.clamp(0.0, 1.0);
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_is_exactly_zero_at_start() {
        assert_eq!(lambda_schedule(0.0, 10.0), 0.0);
    }

    #[test]
    fn lambda_matches_direct_evaluation() {
        // Direct-evaluation oracle at the midpoint and endpoint.
        let direct = |p: f64| 2.0 / (1.0 + (-10.0 * p).exp()) - 1.0;
        assert!((lambda_schedule(0.5, 10.0) - direct(0.5)).abs() < 1e-15);
        assert!((lambda_schedule(1.0, 10.0) - direct(1.0)).abs() < 1e-15);
        // lambda(1) is within 1e-4 of 1.
        assert!((lambda_schedule(1.0, 10.0) - (1.0 - 9.08e-5)).abs() < 1e-7);
    }

    #[test]
    fn lr_matches_direct_evaluation() {
        let sched = ScheduleParams::new(1e-4, 1000);
        assert_eq!(lr_schedule(0.0, &sched), 1e-4);
        let direct = 1e-4 / 11.0f64.powf(0.75);
        assert!((lr_schedule(1.0, &sched) - direct).abs() < 1e-18);
    }

    #[test]
    fn schedules_are_monotone_on_grid() {
        let sched = ScheduleParams::new(5e-5, 1000);
        let mut prev_lambda = f64::NEG_INFINITY;
        let mut prev_lr = f64::INFINITY;
        for i in 0..=1000 {
            let p = i as f64 / 1000.0;
            let l = lambda_schedule(p, 10.0);
            let e = lr_schedule(p, &sched);
            assert!(l >= prev_lambda);
            assert!(e <= prev_lr);
            prev_lambda = l;
            prev_lr = e;
        }
    }

    #[test]
    fn out_of_range_progress_clamps() {
        assert_eq!(lambda_schedule(-0.5, 10.0), lambda_schedule(0.0, 10.0));
        assert_eq!(lambda_schedule(1.5, 10.0), lambda_schedule(1.0, 10.0));
    }
}
