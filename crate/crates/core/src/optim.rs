use std::collections::HashMap;

use crate::autograd::ParamGrads;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Mat;

/// Adam over a fixed group of parameters. No weight decay, constant rate.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    group: Vec<ParamId>,
    moments: HashMap<ParamId, (Mat, Mat)>,
}

impl Adam {
    pub fn new(lr: f64, group: Vec<ParamId>) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, group, moments: HashMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. Parameters of the group absent from `grads` are treated as
    /// having zero gradient; parameters outside the group are never touched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for &id in &self.group {
            let param = store.get_mut(id);
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Mat::zeros(param.rows(), param.cols()), Mat::zeros(param.rows(), param.cols())));
            let grad = grads.get(id);
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, p) in param.data_mut().iter_mut().enumerate() {
                let gi = grad.map_or(0.0, |g| g.data()[i]);
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = md[i] / c1;
                let vhat = vd[i] / c2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
