use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};
use crate::scalar::Scalar;

/// Linear warmup to `peak` over `warmup` steps, then linear decay to zero
/// at `total`. Steps count from 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearSchedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LinearSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step <= self.warmup {
            if self.warmup == 0 {
                return self.peak;
            }
            return self.peak * step as f64 / self.warmup as f64;
        }
        if self.total <= self.warmup {
            return self.peak;
        }
        let left = self.total.saturating_sub(step) as f64;
        self.peak * left / (self.total - self.warmup) as f64
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: LinearSchedule,
    step: usize,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, schedule: LinearSchedule) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Applies one update from the gradients held in `store`. A non-finite
    /// gradient aborts the step before any parameter or moment changes.
    /// Returns the learning rate used.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<f64> {
        if let Some((_, p)) = store.iter().find(|(_, p)| !p.grad.is_finite()) {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
        self.step += 1;
        let t = self.step as i32;
        let lr = self.schedule.lr(self.step);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let (lr_t, eps) = (T::lit(lr), T::lit(self.eps));
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.data();
            for (((x, m), v), &g) in p.value.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *x -= lr_t * mh / (vh.sqrt() + eps);
            }
        }
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(x: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("x", Tensor::vector(vec![x]));
        s
    }

    #[test]
    fn schedule_shape() {
        let s = LinearSchedule {
            peak: 1e-3,
            warmup: 100,
            total: 1100,
        };
        assert_eq!(s.lr(100), 1e-3);
        assert_eq!(s.lr(50), 5e-4);
        assert_eq!(s.lr(600), 5e-4);
        assert_eq!(s.lr(1100), 0.0);
        assert_eq!(s.lr(5000), 0.0);
        let flat = LinearSchedule { peak: 0.1, warmup: 0, total: 0 };
        assert_eq!(flat.lr(1), 0.1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = one_param(0.7);
        let mut a = Adam::new(&s, LinearSchedule { peak: 0.1, warmup: 0, total: 10 });
        a.step(&mut s).unwrap();
        a.step(&mut s).unwrap();
        assert_eq!(s.value(s.id("x").unwrap()).data(), &[0.7]);
    }

    #[test]
    fn two_step_hand_trace() {
        // warmup 2 of total 4 at peak 0.1: lr1 = 0.05, lr2 = 0.1.
        let mut s = one_param(1.0);
        let id = s.id("x").unwrap();
        let mut a = Adam::new(&s, LinearSchedule { peak: 0.1, warmup: 2, total: 4 });
        s.get_mut(id).grad = Tensor::vector(vec![0.5]);
        a.step(&mut s).unwrap();
        // m1 = 0.05, v1 = 0.00025; m̂ = 0.5, v̂ = 0.25; x = 1 - 0.05*0.5/(0.5+1e-8)
        let x1 = 1.0 - 0.05 * 0.5 / (0.5 + 1e-8);
        assert!((s.value(id).data()[0] - x1).abs() < 1e-12);
        s.get_mut(id).grad = Tensor::vector(vec![-0.2]);
        a.step(&mut s).unwrap();
        // m2 = 0.9*0.05 - 0.02 = 0.025, v2 = 0.999*0.00025 + 0.001*0.04 = 0.00028975
        let mh = 0.025 / (1.0 - 0.81);
        let vh: f64 = 0.00028975 / (1.0 - 0.998001);
        let x2 = x1 - 0.1 * mh / (vh.sqrt() + 1e-8);
        assert!((s.value(id).data()[0] - x2).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_aborts_without_update() {
        let mut s = one_param(1.0);
        let id = s.id("x").unwrap();
        let mut a = Adam::new(&s, LinearSchedule { peak: 0.1, warmup: 0, total: 4 });
        s.get_mut(id).grad = Tensor::vector(vec![f64::NAN]);
        assert!(matches!(a.step(&mut s), Err(Error::NonFiniteGradient(n)) if n == "x"));
        assert_eq!(s.value(id).data(), &[1.0]);
        assert_eq!(a.steps_taken(), 0);
    }
}
