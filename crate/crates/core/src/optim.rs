//! Bias-corrected Adam.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimState {
    pub const LR: f64 = 1e-4;
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    /// Zero moments shaped like `params`, default hyperparameters.
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        OptimState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            lr: Self::LR,
            beta1: Self::BETA1,
            beta2: Self::BETA2,
            eps: Self::EPS,
        }
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }

    /// One update of every parameter. Nothing is modified if any gradient is
    /// non-finite or misshapen.
    pub fn adam_step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradients and {} moment slots for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        for (id, g) in params.ids().zip(grads) {
            if g.shape() != params.get(id).shape() {
                return Err(Error::shape("adam_step", g.shape(), params.get(id).shape()));
            }
            if !g.all_finite() {
                return Err(Error::Training {
                    iteration: self.step + 1,
                    msg: format!("non-finite gradient for parameter {}", params.name(id)),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((id, g), (m, v)) in params
            .ids()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let p = params.get_mut(id).data_mut();
            let (m, v) = (m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::from_vec(vals));
        s
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = store(vec![1.0, -2.0, 0.5]);
        let mut opt = OptimState::new(&p);
        opt.adam_step(&mut p, &[Tensor::from_vec(vec![0.3, -4.0, 1e-3])])
            .unwrap();
        let expect = [1.0 - 1e-4, -2.0 + 1e-4, 0.5 - 1e-4];
        for (a, e) in p.get(p.ids().next().unwrap()).data().iter().zip(expect) {
            // eps / |g| perturbs the step slightly for small gradients
            assert!((a - e).abs() < 1e-9, "{a} vs {e}");
        }
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = store(vec![1.0, 2.0]);
        let before = p.clone();
        let mut opt = OptimState::new(&p);
        for _ in 0..5 {
            opt.adam_step(&mut p, &[Tensor::zeros(&[2])]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = store(vec![1.0]);
        let before = p.clone();
        let mut opt = OptimState::new(&p);
        let err = opt
            .adam_step(&mut p, &[Tensor::from_vec(vec![f64::NAN])])
            .unwrap_err();
        assert!(err.to_string().contains("parameter p"), "{err}");
        assert_eq!(p, before);
        assert_eq!(opt.step, 0);
    }
}
