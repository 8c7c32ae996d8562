use super::Param;

pub trait Optimizer {
    /// Apply one update using the accumulated gradients. Parameters must be
    /// passed in the same order on every call.
    fn step(&mut self, params: &mut [&mut Param]);
    fn learning_rate(&self) -> f64;
    fn set_learning_rate(&mut self, lr: f64);
}

fn ensure_state(state: &mut Vec<Vec<f32>>, params: &[&mut Param]) {
    if state.is_empty() {
        *state = params.iter().map(|p| vec![0.0; p.len()]).collect();
    }
    assert_eq!(state.len(), params.len(), "optimizer reused with a different parameter list");
}

/// Root-mean-square propagation: `v ← ρv + (1-ρ)g²`, `θ ← θ - lr·g/(√v + ε)`.
#[derive(Debug, Clone)]
pub struct RmsProp {
    pub lr: f64,
    pub rho: f32,
    pub eps: f32,
    mean_square: Vec<Vec<f32>>,
}

impl RmsProp {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            rho: 0.9,
            eps: 1e-7,
            mean_square: Vec::new(),
        }
    }
}

impl Optimizer for RmsProp {
    fn step(&mut self, params: &mut [&mut Param]) {
        ensure_state(&mut self.mean_square, params);
        let lr = self.lr as f32;
        for (p, ms) in params.iter_mut().zip(&mut self.mean_square) {
            for ((w, g), v) in p.value.iter_mut().zip(&p.grad).zip(ms.iter_mut()) {
                *v = self.rho * *v + (1.0 - self.rho) * g * g;
                *w -= lr * g / (v.sqrt() + self.eps);
            }
        }
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut [&mut Param]) {
        ensure_state(&mut self.first, params);
        ensure_state(&mut self.second, params);
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let lr = self.lr as f32;
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            for (((w, g), m), v) in p.value.iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimize(opt: &mut dyn Optimizer) -> f32 {
        // f(w) = (w - 3)^2
        let mut p = Param::filled(1, 0.0);
        for _ in 0..5000 {
            p.grad[0] = 2.0 * (p.value[0] - 3.0);
            opt.step(&mut [&mut p]);
        }
        p.value[0]
    }

    #[test]
    fn both_optimizers_converge_on_a_quadratic() {
        assert!((minimize(&mut RmsProp::new(1e-2)) - 3.0).abs() < 0.05);
        assert!((minimize(&mut Adam::new(1e-2)) - 3.0).abs() < 0.05);
    }

    #[test]
    fn first_adam_step_has_size_lr() {
        let mut p = Param::filled(2, 1.0);
        p.grad = vec![0.5, -100.0];
        let mut adam = Adam::new(1e-3);
        adam.step(&mut [&mut p]);
        assert!((p.value[0] - (1.0 - 1e-3)).abs() < 1e-6);
        assert!((p.value[1] - (1.0 + 1e-3)).abs() < 1e-6);
    }
}
