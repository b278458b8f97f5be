use crate::error::{Error, Result};

use super::tensor::Tensor;

/// SGD with heavy-ball momentum: `v ← μ·v + g`, `p ← p − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// Applies one update and zeroes the gradients. Parameters must be passed
    /// in the same order on every call.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        check_grads(params)?;
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            let g = p.take_grad().expect("checked above");
            for ((x, vi), gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(&g) {
                *vi = self.momentum * *vi + gi;
                *x -= self.lr * *vi;
            }
            p.accumulate_grad(&vec![0.0; g.len()])?;
        }
        Ok(())
    }
}

/// Adaptive-moment optimizer, used for backbone pretraining.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        check_grads(params)?;
        if self.m.len() != params.len() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.take_grad().expect("checked above");
            for (((x, mi), vi), gi) in p
                .data_mut()
                .iter_mut()
                .zip(m.iter_mut())
                .zip(v.iter_mut())
                .zip(&g)
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *x -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
            p.accumulate_grad(&vec![0.0; g.len()])?;
        }
        Ok(())
    }
}

fn check_grads(params: &[&mut Tensor]) -> Result<()> {
    for (i, p) in params.iter().enumerate() {
        if !p.requires_grad() {
            return Err(Error::Usage(format!("parameter {i} is not trainable")));
        }
        if p.grad().is_none() {
            return Err(Error::Usage(format!("parameter {i} has no gradient")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_step() {
        let mut p = Tensor::full(vec![1], 1.0).trainable();
        p.accumulate_grad(&[2.0]).unwrap();
        Sgd::new(0.1, 0.0).step(&mut [&mut p]).unwrap();
        assert!((p.data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(p.grad().unwrap(), &[0.0]);
    }

    #[test]
    fn momentum_recurrence() {
        let mut p = Tensor::full(vec![1], 1.0).trainable();
        let mut opt = Sgd::new(0.1, 0.9);
        for _ in 0..2 {
            p.accumulate_grad(&[1.0]).unwrap();
            opt.step(&mut [&mut p]).unwrap();
        }
        assert!((p.data()[0] - 0.71).abs() < 1e-12);
    }

    #[test]
    fn missing_grad_is_a_usage_error() {
        let mut p = Tensor::full(vec![1], 1.0).trainable();
        assert!(matches!(
            Sgd::new(0.1, 0.9).step(&mut [&mut p]),
            Err(Error::Usage(_))
        ));
        let mut frozen = Tensor::full(vec![1], 1.0);
        assert!(Sgd::new(0.1, 0.9).step(&mut [&mut frozen]).is_err());
    }

    #[test]
    fn quadratic_loss_decreases_monotonically() {
        // f(p) = ½ Σ a_i p_i², ∇f = a ∘ p
        let a = [1.0, 3.0, 0.5, 2.0];
        let f = |p: &Tensor| {
            0.5 * p
                .data()
                .iter()
                .zip(a)
                .map(|(x, ai)| ai * x * x)
                .sum::<f64>()
        };
        let mut p = Tensor::new(vec![4], vec![1.0, -2.0, 3.0, 0.5])
            .unwrap()
            .trainable();
        let mut opt = Sgd::new(0.01, 0.0);
        let mut prev = f(&p);
        for _ in 0..50 {
            let g: Vec<f64> = p.data().iter().zip(a).map(|(x, ai)| ai * x).collect();
            p.accumulate_grad(&g).unwrap();
            opt.step(&mut [&mut p]).unwrap();
            let cur = f(&p);
            assert!(cur < prev);
            prev = cur;
        }
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut p = Tensor::full(vec![2], 1.0).trainable();
        p.accumulate_grad(&[1.0, -1.0]).unwrap();
        Adam::new(0.1).step(&mut [&mut p]).unwrap();
        assert!(p.data()[0] < 1.0 && p.data()[1] > 1.0);
    }
}
