//! Adaptive-moment gradient descent over a [`ParamSet`].

use crate::tensor::ParamSet;

/// Adam with bias correction. Moments are indexed parallel to the
/// parameter set they were created for.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &ParamSet) -> Self {
        let m = (0..params.len()).map(|i| vec![0.0; params.get(i).numel()]).collect();
        let v = (0..params.len()).map(|i| vec![0.0; params.get(i).numel()]).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m,
            v,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// One update from the gradients currently accumulated in `params`.
    /// Leaves the gradient accumulators untouched; the caller zeroes
    /// them at the start of the next step.
    pub fn step(&mut self, params: &mut ParamSet) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for idx in 0..params.len() {
            let tensor = params.get_mut(idx);
            let grad = match tensor.grad() {
                Some(g) => g.to_vec(),
                None => continue,
            };
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let data = tensor.data_mut();
            for i in 0..data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn descends_a_quadratic() {
        let mut params = ParamSet::new();
        let idx = params.add("x", Tensor::new(vec![1], vec![5.0]).unwrap()).unwrap();
        let mut opt = Adam::new(0.1, &params);
        for _ in 0..500 {
            params.zero_grads();
            let x = params.get(idx).data()[0];
            params.get_mut(idx).accumulate_grad(&[2.0 * x]).unwrap();
            opt.step(&mut params);
        }
        assert!(params.get(idx).data()[0].abs() < 1e-2);
    }
}
