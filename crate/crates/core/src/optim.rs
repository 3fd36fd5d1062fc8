use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam with bias correction. Parameters are replaced by fresh leaves after
/// each step, which also clears their gradients.
#[derive(Debug, Clone)]
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
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// `params` must be passed in the same order on every call.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad_or_zeros();
            let mut data = p.to_vec();
            for i in 0..data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
            **p = Tensor::param(data, p.shape())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic() {
        let mut x = Tensor::param(vec![5.0, -3.0], &[2]).unwrap();
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            x.mul(&x).unwrap().sum().backward();
            opt.step(&mut [&mut x]).unwrap();
        }
        assert!(x.data().iter().all(|v| v.abs() < 1e-2), "{:?}", x.data());
    }

    #[test]
    fn zero_gradient_leaves_values() {
        let mut x = Tensor::param(vec![1.0], &[1]).unwrap();
        let mut opt = Adam::new(0.1);
        opt.step(&mut [&mut x]).unwrap();
        assert_eq!(x.to_vec(), vec![1.0]);
    }
}
