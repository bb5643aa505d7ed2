//! First-order optimizers over [`ParamMap`]s.

use serde::{Deserialize, Serialize};

use super::params::ParamMap;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Plain SGD or Adam (β₁ = 0.5, β₂ = 0.999, as is customary for adversarial
/// training). State is allocated lazily on the first step.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self { kind, learning_rate, beta1: 0.5, beta2: 0.999, eps: 1e-8, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Adam, learning_rate)
    }

    /// One descent step: `params ← params − lr · update(grad)`.
    pub fn descend(&mut self, params: &mut ParamMap, grad: &ParamMap) {
        self.step(params, grad, -1.0);
    }

    /// One ascent step: `params ← params + lr · update(grad)`.
    pub fn ascend(&mut self, params: &mut ParamMap, grad: &ParamMap) {
        self.step(params, grad, 1.0);
    }

    fn step(&mut self, params: &mut ParamMap, grad: &ParamMap, sign: f64) {
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => params.axpy(sign * lr, grad),
            OptimizerKind::Adam => {
                let n = params.num_values();
                if self.m.len() != n {
                    self.m = vec![0.0; n];
                    self.v = vec![0.0; n];
                    self.t = 0;
                }
                self.t += 1;
                let bc1 = 1.0 - self.beta1.powi(self.t as i32);
                let bc2 = 1.0 - self.beta2.powi(self.t as i32);
                for (k, (p, g)) in params.iter_values_mut().zip(grad.iter_values()).enumerate() {
                    self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
                    self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
                    let mh = self.m[k] / bc1;
                    let vh = self.v[k] / bc2;
                    *p += sign * lr * mh / (vh.sqrt() + self.eps);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = ParamMap::new().with("x", &[2], vec![3.0, -2.0]).unwrap();
        let mut opt = Optimizer::adam(0.05);
        for _ in 0..2000 {
            let g = p.scaled(2.0);
            opt.descend(&mut p, &g);
        }
        assert!(p.max_abs() < 1e-2, "{p:?}");
    }

    #[test]
    fn sgd_step_is_exact() {
        let mut p = ParamMap::new().with("x", &[1], vec![1.0]).unwrap();
        let g = ParamMap::new().with("x", &[1], vec![0.5]).unwrap();
        Optimizer::sgd(0.1).descend(&mut p, &g);
        assert_eq!(p.flatten(), vec![1.0 - 0.05]);
    }
}
