use serde::{Deserialize, Serialize};

use crate::params::{Gradients, ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over a fixed subset of a parameter set. Parameters outside the
/// subset are never touched, whatever gradients are supplied.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    cfg: AdamConfig,
    ids: Vec<ParamId>,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    steps: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, params: &ParamSet<T>, ids: Vec<ParamId>) -> Self {
        let zeros = |id: &ParamId| {
            let [r, c] = params.get(*id).shape();
            Tensor::zeros(r, c)
        };
        Self {
            cfg,
            m: ids.iter().map(zeros).collect(),
            v: ids.iter().map(zeros).collect(),
            ids,
            steps: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &Gradients<T>) {
        self.steps += 1;
        let t = self.steps as f64;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        let step_size = T::from_f64(c.lr / bc1);
        let b1 = T::from_f64(c.beta1);
        let b2 = T::from_f64(c.beta2);
        let one_m_b1 = T::from_f64(1.0 - c.beta1);
        let one_m_b2 = T::from_f64(1.0 - c.beta2);
        let inv_sqrt_bc2 = T::from_f64(1.0 / bc2.sqrt());
        let eps = T::from_f64(c.eps);
        for (slot, &id) in self.ids.iter().enumerate() {
            let Some(g) = grads.get(id) else { continue };
            let p = params.get_mut(id).data_mut();
            let m = self.m[slot].data_mut();
            let v = self.v[slot].data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + one_m_b1 * gi;
                v[i] = b2 * v[i] + one_m_b2 * gi * gi;
                p[i] -= step_size * m[i] / (v[i].sqrt() * inv_sqrt_bc2 + eps);
            }
        }
    }

    /// Moment buffers and step count, for checkpointing.
    pub fn state(&self) -> (u64, &[Tensor<T>], &[Tensor<T>]) {
        (self.steps, &self.m, &self.v)
    }

    pub fn restore(&mut self, steps: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) -> bool {
        let ok = m.len() == self.m.len()
            && v.len() == self.v.len()
            && m.iter().zip(&self.m).all(|(a, b)| a.shape() == b.shape())
            && v.iter().zip(&self.v).all(|(a, b)| a.shape() == b.shape());
        if ok {
            self.steps = steps;
            self.m = m;
            self.v = v;
        }
        ok
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut set = ParamSet::<f64>::new();
        let a = set.insert("a", Tensor::from_vec(1, 2, vec![1.0, -1.0]).unwrap());
        let b = set.insert("b", Tensor::scalar(5.0));
        let mut grads = Gradients::new(2);
        grads.accumulate(a, Tensor::from_vec(1, 2, vec![0.3, -7.0]).unwrap());
        grads.accumulate(b, Tensor::scalar(1.0));
        let mut opt = Adam::new(AdamConfig::with_lr(0.1), &set, vec![a]);
        opt.step(&mut set, &grads);
        let av = set.get(a).data();
        assert!((av[0] - 0.9).abs() < 1e-6);
        assert!((av[1] + 0.9).abs() < 1e-6);
        assert_eq!(set.get(b).data(), &[5.0], "parameter outside the subset moved");
    }
}
