//! SGD with Nesterov momentum and a milestone step schedule.
//!
//! With effective gradient `g = grad + weight_decay * param`, each step does
//!
//! ```text
//! v     <- momentum * v - lr * g
//! param <- param + momentum * v - lr * g
//! ```
//!
//! which is the "look-ahead" form of Nesterov momentum (velocity starts at 0).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SgdNesterov {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<Vec<f32>>,
}

impl SgdNesterov {
    pub fn new(lr: f32, momentum: f32, weight_decay: f32) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(format!("momentum must lie in [0,1), got {momentum}")));
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::config(format!("weight decay must be nonnegative, got {weight_decay}")));
        }
        Ok(SgdNesterov { lr, momentum, weight_decay, velocity: Vec::new() })
    }

    pub fn velocity(&self) -> &[Vec<f32>] {
        &self.velocity
    }

    /// Applies one update to every parameter that carries a gradient.
    pub fn step(&mut self, params: &mut [Tensor]) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} parameters, given {}",
                self.velocity.len(),
                params.len()
            )));
        }
        let (lr, mu, wd) = (self.lr, self.momentum, self.weight_decay);
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            if v.len() != p.len() {
                return Err(Error::shape("velocity buffer does not match parameter"));
            }
            let (data, grad) = p.data_and_grad();
            let Some(grad) = grad else { continue };
            for ((w, &g), vel) in data.iter_mut().zip(grad).zip(v.iter_mut()) {
                let g_eff = g + wd * *w;
                *vel = mu * *vel - lr * g_eff;
                *w += mu * *vel - lr * g_eff;
            }
        }
        Ok(())
    }
}

/// Step decay at fractional milestones of the epoch budget.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f32,
    pub milestones: Vec<f32>,
    pub drop_factor: f32,
    pub epochs: usize,
}

impl LrSchedule {
    pub fn new(base_lr: f32, milestones: Vec<f32>, drop_factor: f32, epochs: usize) -> Result<Self> {
        if milestones.iter().any(|m| !(*m > 0.0 && *m < 1.0))
            || milestones.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::config(format!(
                "milestones must be strictly increasing inside (0,1), got {milestones:?}"
            )));
        }
        if !(base_lr > 0.0) || !(drop_factor > 0.0) {
            return Err(Error::config("learning rate and drop factor must be positive"));
        }
        Ok(LrSchedule { base_lr, milestones, drop_factor, epochs })
    }

    /// Epoch indices (0-based) at which each drop takes effect.
    pub fn boundaries(&self) -> Vec<usize> {
        self.milestones
            .iter()
            .map(|m| (m * self.epochs as f32).floor() as usize)
            .collect()
    }

    /// Learning rate for a 0-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f32 {
        let drops = self.boundaries().iter().filter(|&&b| epoch >= b).count();
        self.base_lr / self.drop_factor.powi(drops as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(vals: &[f32], grad: &[f32]) -> Tensor {
        let mut t = Tensor::new(&[vals.len()], vals.to_vec()).unwrap();
        t.accumulate_grad(grad).unwrap();
        t
    }

    #[test]
    fn zero_momentum_is_plain_sgd() {
        let mut opt = SgdNesterov::new(0.1, 0.0, 0.0).unwrap();
        let mut ps = vec![param(&[1.0, -2.0], &[0.5, -1.0])];
        opt.step(&mut ps).unwrap();
        assert_eq!(ps[0].data(), [1.0 - 0.05, -2.0 + 0.1]);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut opt = SgdNesterov::new(0.1, 0.9, 0.0).unwrap();
        let mut ps = vec![param(&[1.0, -2.0], &[0.0, 0.0])];
        opt.step(&mut ps).unwrap();
        assert_eq!(ps[0].data(), [1.0, -2.0]);
        assert_eq!(opt.velocity()[0], [0.0, 0.0]);
    }

    #[test]
    fn two_steps_on_square_match_hand_iteration() {
        // f(w) = w^2, w0 = 1, lr 0.1, mu 0.9:
        //   g0 = 2,    v1 = -0.2,   w1 = 1 - 0.18 - 0.2 = 0.62
        //   g1 = 1.24, v2 = -0.304, w2 = 0.62 - 0.2736 - 0.124 = 0.2224
        let mut opt = SgdNesterov::new(0.1, 0.9, 0.0).unwrap();
        let mut ps = vec![param(&[1.0], &[2.0])];
        opt.step(&mut ps).unwrap();
        assert!((ps[0].data()[0] - 0.62).abs() < 1e-6);
        let w = ps[0].data()[0];
        ps[0].zero_grad();
        ps[0].accumulate_grad(&[2.0 * w]).unwrap();
        opt.step(&mut ps).unwrap();
        assert!((ps[0].data()[0] - 0.2224).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_is_added_to_gradient() {
        let mut opt = SgdNesterov::new(0.5, 0.0, 0.1).unwrap();
        let mut ps = vec![param(&[2.0], &[0.0])];
        opt.step(&mut ps).unwrap();
        assert!((ps[0].data()[0] - (2.0 - 0.5 * 0.2)).abs() < 1e-7);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(SgdNesterov::new(0.0, 0.9, 0.0).is_err());
        assert!(SgdNesterov::new(0.1, 1.0, 0.0).is_err());
        assert!(SgdNesterov::new(0.1, 0.9, -1.0).is_err());
    }

    #[test]
    fn schedule_drops_at_floor_of_milestone() {
        let s = LrSchedule::new(0.1, vec![0.5], 10.0, 10).unwrap();
        for e in 0..5 {
            assert_eq!(s.lr_at(e), 0.1);
        }
        for e in 5..10 {
            assert!((s.lr_at(e) - 0.01).abs() < 1e-9);
        }
        let s = LrSchedule::new(0.1, vec![0.5, 0.83], 10.0, 360).unwrap();
        assert_eq!(s.boundaries(), vec![180, 298]);
        assert!((s.lr_at(359) - 0.001).abs() < 1e-9);
        assert!(LrSchedule::new(0.1, vec![0.6, 0.5], 10.0, 10).is_err());
        assert!(LrSchedule::new(0.1, vec![1.0], 10.0, 10).is_err());
    }
}
