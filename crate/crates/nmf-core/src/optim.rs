//! Adam with bias correction, applied on the flattened parameter vector,
//! followed by projection of the rate matrix onto its constraint set.

use ndarray::Array1;

use crate::gradient::GradientBundle;
use crate::model::NmfParameters;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<F> {
    cfg: AdamConfig,
    first: Array1<F>,
    second: Array1<F>,
    step: u64,
}

impl<F: Scalar> Adam<F> {
    pub fn new(num_params: usize, cfg: AdamConfig) -> Self {
        Self { cfg, first: Array1::zeros(num_params), second: Array1::zeros(num_params), step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update: moment accumulation, bias correction, parameter step,
    /// then projection (rates clipped at zero, diagonal and masked entries
    /// pinned).
    pub fn step(&mut self, params: &mut NmfParameters<F>, grads: &GradientBundle<F>) {
        let g = grads.flatten();
        assert_eq!(g.len(), self.first.len(), "gradient length mismatch");
        self.step += 1;
        let b1 = F::of(self.cfg.beta1);
        let b2 = F::of(self.cfg.beta2);
        let lr = F::of(self.cfg.lr);
        let eps = F::of(self.cfg.epsilon);
        let corr1 = F::one() - F::of(self.cfg.beta1.powi(self.step as i32));
        let corr2 = F::one() - F::of(self.cfg.beta2.powi(self.step as i32));
        let mut theta = params.flatten();
        for i in 0..theta.len() {
            let gi = g[i];
            self.first[i] = b1 * self.first[i] + (F::one() - b1) * gi;
            self.second[i] = b2 * self.second[i] + (F::one() - b2) * gi * gi;
            let mhat = self.first[i] / corr1;
            let vhat = self.second[i] / corr2;
            theta[i] = theta[i] - lr * mhat / (vhat.sqrt() + eps);
        }
        params.assign_flat(theta.as_slice().expect("contiguous"));
        params.project();
    }
}
