//! AdamW with decoupled weight decay, and the warmup + cosine learning-rate
//! schedule.

use super::Tensor;
use crate::error::{Error, Result};

pub const ADAM_EPS: f64 = 1e-8;

/// Linear warmup to `base_lr`, then cosine decay to `floor_fraction * base_lr`.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_iters: u64,
    pub total_iters: u64,
    pub floor_fraction: f64,
}

impl Schedule {
    pub fn new(base_lr: f64, warmup_iters: u64, total_iters: u64, floor_fraction: f64) -> Result<Self> {
        if warmup_iters == 0 || warmup_iters > total_iters {
            return Err(Error::Config(format!(
                "schedule requires 0 < warmup ({warmup_iters}) <= total ({total_iters})"
            )));
        }
        if !(0.0..1.0).contains(&floor_fraction) {
            return Err(Error::Config(format!("floor_fraction {floor_fraction} not in [0,1)")));
        }
        Ok(Schedule { base_lr, warmup_iters, total_iters, floor_fraction })
    }
}

/// Learning rate at `iter` (0-based, valid through `total_iters` inclusive).
pub fn lr_at(iter: u64, sched: &Schedule) -> Result<f64> {
    if iter > sched.total_iters {
        return Err(Error::Range(format!(
            "iter {} beyond total_iters {}",
            iter, sched.total_iters
        )));
    }
    if iter <= sched.warmup_iters {
        return Ok(sched.base_lr * iter as f64 / sched.warmup_iters as f64);
    }
    let floor = sched.floor_fraction * sched.base_lr;
    let span = (sched.total_iters - sched.warmup_iters) as f64;
    let t = (iter - sched.warmup_iters) as f64 / span;
    Ok(floor + (sched.base_lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// First/second moment accumulators, parallel to a parameter slice.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step_count: u64,
}

impl OptState {
    pub fn new() -> Self {
        Self::default()
    }

    fn ensure(&mut self, params: &[Tensor]) {
        if self.first_moment.len() != params.len() {
            self.first_moment = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.second_moment = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
    }
}

/// One AdamW step with bias-corrected moments and decoupled weight decay:
/// `p -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)`.
///
/// `grads[i] == None` leaves parameter i and its moments untouched (frozen).
/// `step_count` increments by exactly one per call.
pub fn adamw_step(
    params: &mut [Tensor],
    grads: &[Option<Vec<f64>>],
    state: &mut OptState,
    lr: f64,
    betas: (f64, f64),
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape(format!(
            "adamw: {} params vs {} grads",
            params.len(),
            grads.len()
        )));
    }
    if lr < 0.0 {
        return Err(Error::Range(format!("adamw: negative lr {lr}")));
    }
    state.ensure(params);
    state.step_count += 1;
    let t = state.step_count;
    let (b1, b2) = betas;
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);

    for (i, p) in params.iter_mut().enumerate() {
        let Some(g) = &grads[i] else { continue };
        if g.len() != p.numel() {
            return Err(Error::Shape(format!(
                "adamw: param {} has {} elements, grad has {}",
                i,
                p.numel(),
                g.len()
            )));
        }
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for j in 0..g.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p.data[j] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + weight_decay * p.data[j]);
        }
        p.check_finite("adamw update")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> Vec<Tensor> {
        vec![Tensor::scalar(v)]
    }

    #[test]
    fn zero_lr_is_identity_on_params_but_updates_moments() {
        let mut params = one_param(1.0);
        let grads = vec![Some(vec![0.7])];
        let mut st = OptState::new();
        adamw_step(&mut params, &grads, &mut st, 0.0, (0.9, 0.95), 0.0).unwrap();
        assert_eq!(params[0].data[0], 1.0);
        assert!(st.first_moment[0][0] != 0.0);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn first_step_matches_hand_computed_update() {
        // p=1, g=1, betas=(0.9,0.95), wd=0, lr=0.1: m_hat = v_hat = 1
        let mut params = one_param(1.0);
        let grads = vec![Some(vec![1.0])];
        let mut st = OptState::new();
        adamw_step(&mut params, &grads, &mut st, 0.1, (0.9, 0.95), 0.0).unwrap();
        let expect = 1.0 - 0.1 * 1.0 / (1.0 + ADAM_EPS);
        assert!((params[0].data[0] - expect).abs() < 1e-15);
        assert!((params[0].data[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decay_only_path() {
        // grad 0 at step 1: moments stay 0, update is pure decay
        let mut params = one_param(2.0);
        let grads = vec![Some(vec![0.0])];
        let mut st = OptState::new();
        adamw_step(&mut params, &grads, &mut st, 0.1, (0.9, 0.95), 0.05).unwrap();
        assert!((params[0].data[0] - 2.0 * (1.0 - 0.1 * 0.05)).abs() < 1e-15);
    }

    #[test]
    fn frozen_entries_untouched() {
        let mut params = vec![Tensor::scalar(1.0), Tensor::scalar(5.0)];
        let grads = vec![Some(vec![1.0]), None];
        let mut st = OptState::new();
        adamw_step(&mut params, &grads, &mut st, 0.1, (0.9, 0.95), 0.05).unwrap();
        assert_eq!(params[1].data[0], 5.0);
        assert_eq!(st.first_moment[1][0], 0.0);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut params = one_param(1.0);
        let grads = vec![Some(vec![1.0, 2.0])];
        let mut st = OptState::new();
        let r = adamw_step(&mut params, &grads, &mut st, 0.1, (0.9, 0.95), 0.0);
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn schedule_endpoints() {
        let s = Schedule::new(2e-4, 200, 2000, 0.1).unwrap();
        assert_eq!(lr_at(0, &s).unwrap(), 0.0);
        assert_eq!(lr_at(200, &s).unwrap(), 2e-4);
        assert!((lr_at(2000, &s).unwrap() - 2e-5).abs() < 1e-18);
        assert!(matches!(lr_at(2001, &s), Err(Error::Range(_))));
    }

    #[test]
    fn schedule_validation() {
        assert!(Schedule::new(1e-3, 0, 10, 0.1).is_err());
        assert!(Schedule::new(1e-3, 11, 10, 0.1).is_err());
        assert!(Schedule::new(1e-3, 5, 10, 1.0).is_err());
    }

    #[test]
    fn warmup_is_linear_and_decay_monotone() {
        let s = Schedule::new(1e-3, 100, 1000, 0.1).unwrap();
        assert!((lr_at(50, &s).unwrap() - 5e-4).abs() < 1e-18);
        let mut prev = lr_at(100, &s).unwrap();
        for it in 101..=1000 {
            let cur = lr_at(it, &s).unwrap();
            assert!(cur <= prev);
            prev = cur;
        }
    }
}
