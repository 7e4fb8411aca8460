use serde::{Deserialize, Serialize};

use crate::params::{Grads, ParamSet};

/// Adam with bias correction; steps minimize.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, p) in params.iter_mut().enumerate() {
            let g = &grads.values[k];
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            for i in 0..p.value.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p.value[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Plain gradient descent.
#[derive(Debug, Clone, Copy)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn step(&self, params: &mut ParamSet, grads: &Grads) {
        for (k, p) in params.iter_mut().enumerate() {
            for (w, g) in p.value.iter_mut().zip(&grads.values[k]) {
                *w -= self.lr * g;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut ps = ParamSet::new();
        ps.add("w", &[3], Init::Constant(1.0), 0).unwrap();
        let grads = Grads { values: vec![vec![2.0, -0.5, 1e-3]] };
        let mut opt = Adam::new(&ps, 1e-3);
        opt.step(&mut ps, &grads);
        let w = &ps.iter().next().unwrap().value;
        assert!((w[0] - (1.0 - 1e-3)).abs() < 1e-10);
        assert!((w[1] - (1.0 + 1e-3)).abs() < 1e-10);
        assert!((w[2] - (1.0 - 1e-3)).abs() < 1e-7);
    }

    #[test]
    fn sgd_on_quadratic() {
        // f(w) = w², one step with lr 0.1 from 1.0 lands at 0.8.
        let mut ps = ParamSet::new();
        ps.add("w", &[1], Init::Constant(1.0), 0).unwrap();
        let grads = Grads { values: vec![vec![2.0]] };
        Sgd { lr: 0.1 }.step(&mut ps, &grads);
        assert!((ps.iter().next().unwrap().value[0] - 0.8).abs() < 1e-15);
    }
}
